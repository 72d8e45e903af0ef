use legged_core::command::LocomotionCommand;
use legged_core::footstep::{plan_footsteps, FootstepConfig};
use legged_core::gait::{build_contact_table, contact_state, gait_library, swing_phase, GaitSpec};
use legged_core::model::{neutral_state, RobotModel};
use nalgebra::{Rotation2, UnitQuaternion, Vector2, Vector3};
use proptest::prelude::*;

fn arb_gait() -> impl Strategy<Value = GaitSpec> {
    (0.2f64..1.0, prop::array::uniform4(0.0f64..1.0), prop::array::uniform4(0.05f64..=1.0))
        .prop_map(|(t, o, s)| GaitSpec::new("random", t, o, s).unwrap())
}

proptest! {
    #[test]
    fn contact_state_is_periodic(g in arb_gait(), t in 0.0f64..10.0, k in 1u32..5) {
        // sample at phases away from switching instants so rounding cannot flip a flag
        let shifted = t + k as f64 * g.cycle_duration;
        for foot in 0..4 {
            let phase = g.foot_phase(t, foot);
            let margin = (phase - g.stance_fractions[foot]).abs().min(phase).min(1.0 - phase);
            prop_assume!(margin > 1e-9);
        }
        prop_assert_eq!(contact_state(&g, t), contact_state(&g, shifted));
    }

    #[test]
    fn swing_phase_consistent_with_contact(g in arb_gait(), t in 0.0f64..10.0) {
        let c = contact_state(&g, t);
        for foot in 0..4 {
            let s = swing_phase(&g, t, foot);
            prop_assert_eq!(s.in_swing, !c[foot]);
            prop_assert!((0.0..=1.0).contains(&s.progress));
            prop_assert!(s.remaining_swing_time >= 0.0 && s.remaining_swing_time <= g.swing_time(foot) + 1e-12);
        }
    }

    #[test]
    fn table_rows_match_contact_state(g in arb_gait(), t in 0.0f64..5.0, horizon in 1usize..20, dt in 0.01f64..0.1) {
        let table = build_contact_table(&g, t, horizon, dt);
        prop_assert_eq!(table.flags.len(), horizon);
        for (k, row) in table.flags.iter().enumerate() {
            prop_assert_eq!(*row, contact_state(&g, t + k as f64 * dt));
        }
    }

    #[test]
    fn footsteps_equivariant_under_yaw(
        phi in -3.0f64..3.0,
        yaw in -1.0f64..1.0,
        px in -1.0f64..1.0, py in -1.0f64..1.0,
        vx in -1.5f64..1.5, vy in -0.5f64..0.5,
        cx in -1.5f64..1.5, cy in -0.5f64..0.5,
        wz in -1.0f64..1.0,
        t in 0.0f64..2.0,
        gait_idx in 0usize..8,
    ) {
        let model = RobotModel::bundled();
        let gait = &gait_library()[gait_idx];
        let cfg = FootstepConfig::default();
        let mut s = neutral_state(&model);
        s.base_orientation = UnitQuaternion::from_euler_angles(0.0, 0.0, yaw);
        s.base_position = Vector3::new(px, py, 0.29);
        s.base_linear_velocity = Vector3::new(vx, vy, 0.0);
        let cmd = LocomotionCommand { velocity: Vector2::new(cx, cy), yaw_rate: wz, body_height: 0.29 };

        let rz = UnitQuaternion::from_euler_angles(0.0, 0.0, phi);
        let r2 = Rotation2::new(phi);
        let mut s2 = s.clone();
        s2.base_orientation = rz * s.base_orientation;
        s2.base_position = rz * s.base_position;
        s2.base_linear_velocity = rz * s.base_linear_velocity;
        let cmd2 = LocomotionCommand { velocity: r2 * cmd.velocity, ..cmd };

        let a = plan_footsteps(&model, &s, &cmd, gait, t, &cfg);
        let b = plan_footsteps(&model, &s2, &cmd2, gait, t, &cfg);
        for foot in 0..4 {
            let expect = r2 * a.targets[foot].xy();
            prop_assert!((expect - b.targets[foot].xy()).norm() < 1e-9);
            prop_assert_eq!(b.targets[foot].z, 0.0);
        }
        prop_assert_eq!(a.valid, b.valid);
    }

    #[test]
    fn matched_velocity_gives_symmetric_stance(vx in -1.0f64..1.0, vy in -0.3f64..0.3, t in 0.0f64..2.0) {
        let model = RobotModel::bundled();
        let gait = gait_library().into_iter().find(|g| g.name == "trot").unwrap();
        let mut s = neutral_state(&model);
        s.base_linear_velocity = Vector3::new(vx, vy, 0.0);
        let cmd = LocomotionCommand { velocity: Vector2::new(vx, vy), yaw_rate: 0.0, body_height: 0.29 };
        let step = plan_footsteps(&model, &s, &cmd, &gait, t, &FootstepConfig::default());
        for foot in 0..4 {
            let sw = swing_phase(&gait, t, foot);
            let until = if sw.in_swing {
                sw.remaining_swing_time
            } else {
                let phase = gait.foot_phase(t, foot);
                (gait.stance_fractions[foot] - phase) * gait.cycle_duration + gait.swing_time(foot)
            };
            let shoulder = s.base_position.xy() + s.base_linear_velocity.xy() * until + model.shoulder_offsets[foot].xy();
            let expect = s.base_linear_velocity.xy() * (0.5 * gait.stance_time(foot));
            prop_assert!((step.targets[foot].xy() - shoulder - expect).norm() < 1e-12);
        }
    }
}
