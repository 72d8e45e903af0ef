//! Foothold selection and swing-foot reference trajectories.
//!
//! Each target is the shoulder position at predicted touchdown, shifted by a
//! velocity-symmetry term with a small feedback correction and by a
//! centrifugal term from the commanded yaw rate.

use nalgebra::{Rotation3, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::command::LocomotionCommand;
use crate::gait::{stance_phase, swing_phase, GaitSpec};
use crate::model::{GeneralizedState, RobotModel, NUM_LEGS};

/// Lateral step-width adjustment ramp.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WidthSchedule {
    /// Speed (m/s) below which no adjustment is applied.
    pub speed_start: f64,
    /// Speed (m/s) at which the full adjustment is reached.
    pub speed_full: f64,
    /// Full lateral shift (m).
    pub max_shift: f64,
}

impl Default for WidthSchedule {
    fn default() -> Self {
        Self {
            speed_start: 1.5,
            speed_full: 3.5,
            max_shift: 0.05,
        }
    }
}

impl WidthSchedule {
    pub fn shift(&self, speed: f64) -> f64 {
        let span = (self.speed_full - self.speed_start).max(f64::EPSILON);
        ((speed.abs() - self.speed_start) / span).clamp(0.0, 1.0) * self.max_shift
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FootstepConfig {
    /// Velocity-error feedback gain (s).
    pub k: f64,
    /// Swing apex height above the higher endpoint (m).
    pub apex: f64,
    /// Vertical foot velocity at touchdown (m/s), usually slightly negative.
    pub touchdown_vz: f64,
    /// Horizontal distance limit between target and shoulder projection (m).
    pub max_reach: f64,
    pub width_schedule: WidthSchedule,
}

impl Default for FootstepConfig {
    fn default() -> Self {
        Self {
            k: 0.03,
            apex: 0.06,
            touchdown_vz: -0.1,
            max_reach: 0.3,
            width_schedule: WidthSchedule::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepCommand {
    /// World-frame target per foot, on the ground plane.
    pub targets: [Vector3<f64>; NUM_LEGS],
    /// True for feet currently in swing.
    pub valid: [bool; NUM_LEGS],
}

/// Raibert-style symmetry offset plus velocity feedback, in the plane.
pub fn symmetry_term(stance_time: f64, v: &Vector2<f64>, v_cmd: &Vector2<f64>, k: f64) -> Vector2<f64> {
    v * (0.5 * stance_time) + (v - v_cmd) * k
}

/// Centrifugal compensation `½·√(h/g)·(v × ω_cmd)`.
pub fn centrifugal_term(height: f64, gravity: f64, v: &Vector3<f64>, omega_cmd: &Vector3<f64>) -> Vector3<f64> {
    0.5 * (height / gravity).sqrt() * v.cross(omega_cmd)
}

/// Plan targets for every foot; feet in stance get the target for their next
/// touchdown but are flagged invalid.
pub fn plan_footsteps(
    model: &RobotModel,
    state: &GeneralizedState,
    command: &LocomotionCommand,
    gait: &GaitSpec,
    t: f64,
    config: &FootstepConfig,
) -> StepCommand {
    let v3 = state.base_linear_velocity;
    let v = v3.xy();
    let yaw = state.euler_rpy().z;
    let g = model.gravity_magnitude();
    let omega_cmd = Vector3::new(0.0, 0.0, command.yaw_rate);
    let centrifugal = centrifugal_term(command.body_height, g, &Vector3::new(v.x, v.y, 0.0), &omega_cmd).xy();

    let mut targets = [Vector3::zeros(); NUM_LEGS];
    let mut valid = [false; NUM_LEGS];
    for foot in 0..NUM_LEGS {
        let swing = swing_phase(gait, t, foot);
        let until_touchdown = if swing.in_swing {
            swing.remaining_swing_time
        } else {
            stance_phase(gait, t, foot).map_or(0.0, |(_, rem)| rem) + gait.swing_time(foot)
        };
        valid[foot] = swing.in_swing;

        let base_td = state.base_position.xy() + v * until_touchdown;
        let yaw_td = yaw + command.yaw_rate * until_touchdown;
        let shoulder = base_td + (Rotation3::from_axis_angle(&Vector3::z_axis(), yaw_td) * model.shoulder_offsets[foot]).xy();

        let mut offset = symmetry_term(gait.stance_time(foot), &v, &command.velocity, config.k) + centrifugal;
        let reach = offset.norm();
        if reach > config.max_reach {
            offset *= config.max_reach / reach;
        }
        let p = shoulder + offset;
        targets[foot] = Vector3::new(p.x, p.y, 0.0);
    }
    StepCommand { targets, valid }
}

/// Narrow the front stance and widen the hind stance as speed grows.
/// Shifts act along the body's lateral axis at heading `yaw`.
pub fn speed_step_width_adjust(step: &StepCommand, forward_speed: f64, yaw: f64, schedule: &WidthSchedule) -> StepCommand {
    let w = schedule.shift(forward_speed);
    if w == 0.0 {
        return *step;
    }
    let lateral = Vector3::new(-yaw.sin(), yaw.cos(), 0.0);
    let mut out = *step;
    for (foot, target) in out.targets.iter_mut().enumerate() {
        // +1 for left feet, -1 for right feet
        let side = if foot % 2 == 1 { 1.0 } else { -1.0 };
        let outward = if foot < 2 { -1.0 } else { 1.0 };
        *target += lateral * (side * outward * w);
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SwingParams {
    pub apex_height: f64,
    /// Total swing duration (s); scales the returned derivatives.
    pub duration: f64,
    pub touchdown_vz: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SwingSample {
    pub pos: Vector3<f64>,
    pub vel: Vector3<f64>,
    pub acc: Vector3<f64>,
}

/// Cubic Hermite segment with unit parameter; returns value and first two
/// derivatives with respect to `u`.
fn hermite(p0: f64, m0: f64, p1: f64, m1: f64, u: f64) -> (f64, f64, f64) {
    let (u2, u3) = (u * u, u * u * u);
    let p = (2.0 * u3 - 3.0 * u2 + 1.0) * p0
        + (u3 - 2.0 * u2 + u) * m0
        + (-2.0 * u3 + 3.0 * u2) * p1
        + (u3 - u2) * m1;
    let d = (6.0 * u2 - 6.0 * u) * p0 + (3.0 * u2 - 4.0 * u + 1.0) * m0 + (-6.0 * u2 + 6.0 * u) * p1 + (3.0 * u2 - 2.0 * u) * m1;
    let dd = (12.0 * u - 6.0) * p0 + (6.0 * u - 4.0) * m0 + (-12.0 * u + 6.0) * p1 + (6.0 * u - 2.0) * m1;
    (p, d, dd)
}

/// Swing reference: smoothstep in the plane, two cubic segments in height
/// meeting at the apex at half progress. Derivatives are per second.
pub fn swing_trajectory(liftoff: &Vector3<f64>, target: &Vector3<f64>, progress: f64, params: &SwingParams) -> SwingSample {
    let s = progress.clamp(0.0, 1.0);
    let duration = params.duration.max(1e-6);

    let blend = 3.0 * s * s - 2.0 * s * s * s;
    let dblend = 6.0 * s - 6.0 * s * s;
    let ddblend = 6.0 - 12.0 * s;
    let delta = target - liftoff;

    let apex = liftoff.z.max(target.z) + params.apex_height;
    // each height segment spans half the swing
    let half = 0.5 * duration;
    let (z, dz_du, ddz_du) = if s <= 0.5 {
        hermite(liftoff.z, 0.0, apex, 0.0, 2.0 * s)
    } else {
        hermite(apex, 0.0, target.z, params.touchdown_vz * half, 2.0 * s - 1.0)
    };

    let pos = Vector3::new(liftoff.x + delta.x * blend, liftoff.y + delta.y * blend, z);
    let vel = Vector3::new(delta.x * dblend / duration, delta.y * dblend / duration, dz_du / half);
    let acc = Vector3::new(
        delta.x * ddblend / (duration * duration),
        delta.y * ddblend / (duration * duration),
        ddz_du / (half * half),
    );
    SwingSample { pos, vel, acc }
}
