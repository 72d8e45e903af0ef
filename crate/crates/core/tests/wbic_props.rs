use legged_core::dynamics::{compute_dynamics, foot_positions, potential_energy};
use legged_core::model::{GenVector, RobotModel, NUM_DOF};
use legged_core::wbic::{
    acceleration_pass, dyn_consistent_inverse, kinematics_pass, pinv, relaxation_qp, stacked_contact_jacobian,
    torque_extraction, wbic_tick, Task, WbicConfig,
};
use nalgebra::{DMatrix, DVector, Vector3};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

mod common;
use common::*;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    #[test]
    fn kinematic_commands_annihilated_by_contacts(seed in any::<u64>(), mask in 1u8..16) {
        let model = RobotModel::bundled();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = random_state(&model, &mut rng, true);
        let d = compute_dynamics(&model, &s);
        let contacts = contacts_from_mask(mask);
        let swing: Vec<usize> = (0..4).filter(|&i| !contacts[i]).collect();
        let tasks = random_tasks(&s, &d, &swing, &mut rng);
        let (jc, _) = stacked_contact_jacobian(&d, &contacts);
        let (dq, qd) = kinematics_pass(&tasks, &jc);
        prop_assert!((&jc * dq).amax() < 1e-9);
        prop_assert!((&jc * qd).amax() < 1e-9);
    }

    #[test]
    fn commanded_acceleration_is_contact_consistent(seed in any::<u64>(), mask in 1u8..16) {
        let model = RobotModel::bundled();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = random_state(&model, &mut rng, true);
        let d = compute_dynamics(&model, &s);
        let contacts = contacts_from_mask(mask);
        let swing: Vec<usize> = (0..4).filter(|&i| !contacts[i]).collect();
        let tasks = random_tasks(&s, &d, &swing, &mut rng);
        let (jc, drift) = stacked_contact_jacobian(&d, &contacts);
        let qdd = acceleration_pass(&tasks, &jc, &drift, &d.mass_matrix).unwrap();
        prop_assert!((&jc * qdd + drift).amax() < 1e-8);
    }

    #[test]
    fn lower_priority_cannot_disturb_higher(seed in any::<u64>(), mask in 0u8..16) {
        let model = RobotModel::bundled();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = random_state(&model, &mut rng, true);
        let d = compute_dynamics(&model, &s);
        let contacts = contacts_from_mask(mask);
        let swing: Vec<usize> = (0..4).filter(|&i| !contacts[i]).collect();
        let tasks = random_tasks(&s, &d, &swing, &mut rng);
        let (jc, drift) = stacked_contact_jacobian(&d, &contacts);
        let base = acceleration_pass(&tasks, &jc, &drift, &d.mass_matrix).unwrap();
        let (dq0, qd0) = kinematics_pass(&tasks, &jc);
        for i in 1..tasks.len() {
            let mut perturbed = tasks.clone();
            perturbed[i].acc_des += DVector::from_fn(3, |_, _| rng.random_range(-5.0..5.0));
            perturbed[i].error += DVector::from_fn(3, |_, _| rng.random_range(-0.1..0.1));
            perturbed[i].vel_des += DVector::from_fn(3, |_, _| rng.random_range(-1.0..1.0));
            let qdd = acceleration_pass(&perturbed, &jc, &drift, &d.mass_matrix).unwrap();
            let (dq, qd) = kinematics_pass(&perturbed, &jc);
            for t in tasks.iter().take(i) {
                prop_assert!((&t.jacobian * (&qdd - &base)).amax() < 1e-8, "task {} moved by task {}", t.label, i);
                prop_assert!((&t.jacobian * (&dq - &dq0)).amax() < 1e-8);
                prop_assert!((&t.jacobian * (&qd - &qd0)).amax() < 1e-8);
            }
        }
    }

    #[test]
    fn pseudo_inverse_identities(seed in any::<u64>(), rows in 1usize..12) {
        let model = RobotModel::bundled();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = random_state(&model, &mut rng, false);
        let d = compute_dynamics(&model, &s);
        let j = DMatrix::from_fn(rows, NUM_DOF, |_, _| rng.random_range(-1.0..1.0));
        prop_assert!((&j * pinv(&j) * &j - &j).amax() < 1e-9);
        let a_inv = d.mass_matrix.try_inverse().unwrap();
        let a_inv = DMatrix::from_fn(NUM_DOF, NUM_DOF, |r, c| a_inv[(r, c)]);
        let jbar = dyn_consistent_inverse(&j, &a_inv);
        prop_assert!((&j * &jbar * &j - &j).amax() < 1e-9);
    }

    #[test]
    fn base_rows_hold_after_relaxation(seed in any::<u64>(), mask in 0u8..16, scale in 0.3f64..1.5) {
        let model = RobotModel::bundled();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = random_state(&model, &mut rng, true);
        let d = compute_dynamics(&model, &s);
        let contacts = contacts_from_mask(mask);
        let swing: Vec<usize> = (0..4).filter(|&i| !contacts[i]).collect();
        let tasks = random_tasks(&s, &d, &swing, &mut rng);
        let n = contacts.iter().filter(|c| **c).count().max(1) as f64;
        let weight = 8.252 * 9.81 / n * scale;
        let forces = std::array::from_fn(|_| Vector3::new(rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0), weight));
        let out = wbic_tick(&s, &d, &contacts, &forces, &tasks, &WbicConfig::default()).unwrap();
        prop_assert!(out.base_residual.amax() < 1e-6, "{}", out.base_residual.amax());
        for (foot, f) in out.forces.iter().enumerate() {
            if contacts[foot] {
                prop_assert!(f.z >= -1e-8);
                prop_assert!(f.x.abs() <= 0.4 * f.z + 1e-8 && f.y.abs() <= 0.4 * f.z + 1e-8);
            } else {
                prop_assert_eq!(*f, Vector3::zeros());
            }
        }
    }
}

#[test]
fn static_balance_needs_no_relaxation() {
    let model = RobotModel::bundled();
    let s = standing_state(&model);
    let d = compute_dynamics(&model, &s);
    let (jc, drift) = stacked_contact_jacobian(&d, &[true; 4]);
    let f = balancing_forces(&jc, &d);
    for k in 0..4 {
        assert!(f[3 * k + 2] > 0.0);
        assert!(f[3 * k].abs() <= 0.4 * f[3 * k + 2] && f[3 * k + 1].abs() <= 0.4 * f[3 * k + 2]);
    }
    let tasks = vec![
        Task::body_orientation(&s, &s.base_orientation, &Vector3::zeros(), &Vector3::zeros(), [100.0, 10.0]),
        Task::body_position(&s, &s.base_position, &Vector3::zeros(), &Vector3::zeros(), [100.0, 10.0]),
    ];
    let qdd = acceleration_pass(&tasks, &jc, &drift, &d.mass_matrix).unwrap();
    assert!(qdd.amax() < 1e-12);
    let qdd = GenVector::from_column_slice(qdd.as_slice());
    let r = relaxation_qp(&qdd, &f, &jc, &d, &WbicConfig::default()).unwrap();
    assert!(r.delta_f.amax() < 1e-7, "{}", r.delta_f);
    assert!(r.delta_fr.amax() < 1e-7, "{}", r.delta_fr);
}

#[test]
fn standing_torque_matches_virtual_work() {
    let model = RobotModel::bundled();
    let s = standing_state(&model);
    let d = compute_dynamics(&model, &s);
    let (jc, _) = stacked_contact_jacobian(&d, &[true; 4]);
    let f = balancing_forces(&jc, &d);
    let (base, tau) = torque_extraction(&GenVector::zeros(), &f, &jc, &d);
    assert!(base.amax() < 1e-9);

    // τ_j = ∂V/∂q_j − Σ (∂p_foot/∂q_j)·f, both by finite differences
    let h = 1e-6;
    for j in 0..12 {
        let mut plus = s.clone();
        let mut minus = s.clone();
        plus.joint_positions[j] += h;
        minus.joint_positions[j] -= h;
        let dv = (potential_energy(&model, &plus) - potential_energy(&model, &minus)) / (2.0 * h);
        let feet_p = foot_positions(&model, &plus);
        let feet_m = foot_positions(&model, &minus);
        let work: f64 = (0..4)
            .map(|k| ((feet_p[k] - feet_m[k]) / (2.0 * h)).dot(&Vector3::new(f[3 * k], f[3 * k + 1], f[3 * k + 2])))
            .sum();
        let expect = dv - work;
        assert!((tau[j] - expect).abs() < 1e-6 * (1.0 + expect.abs()), "joint {j}: {} vs {expect}", tau[j]);
    }
}

#[test]
fn flight_relaxation_gives_free_fall() {
    let model = RobotModel::bundled();
    let s = standing_state(&model);
    let d = compute_dynamics(&model, &s);
    let jc = DMatrix::zeros(0, NUM_DOF);
    let r = relaxation_qp(&GenVector::zeros(), &DVector::zeros(0), &jc, &d, &WbicConfig::default()).unwrap();
    assert!(r.forces.is_empty());
    let lin = r.qdd.fixed_rows::<3>(3).into_owned();
    assert!((lin - model.gravity).amax() < 1e-9, "{lin}");
    assert!(r.qdd.fixed_rows::<3>(0).amax() < 1e-9);
}

#[test]
fn force_relaxation_shrinks_as_force_weight_grows() {
    let model = RobotModel::bundled();
    let s = standing_state(&model);
    let d = compute_dynamics(&model, &s);
    let (jc, _) = stacked_contact_jacobian(&d, &[true; 4]);
    let f = balancing_forces(&jc, &d) * 0.8;
    let mut last = f64::INFINITY;
    for q1 in [0.01, 0.1, 1.0, 10.0, 100.0] {
        let cfg = WbicConfig {
            q1,
            ..WbicConfig::default()
        };
        let r = relaxation_qp(&GenVector::zeros(), &f, &jc, &d, &cfg).unwrap();
        let n = r.delta_fr.norm();
        assert!(n <= last + 1e-12, "q1 {q1}: {n} > {last}");
        last = n;
    }
}

#[test]
fn outputs_are_deterministic() {
    let model = RobotModel::bundled();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let s = random_state(&model, &mut rng, true);
    let d = compute_dynamics(&model, &s);
    let tasks = random_tasks(&s, &d, &[1, 2], &mut rng);
    let contacts = [true, false, false, true];
    let forces = [Vector3::new(0.0, 0.0, 40.0); 4];
    let a = wbic_tick(&s, &d, &contacts, &forces, &tasks, &WbicConfig::default()).unwrap();
    let b = wbic_tick(&s, &d, &contacts, &forces, &tasks, &WbicConfig::default()).unwrap();
    assert_eq!(a, b);
}
