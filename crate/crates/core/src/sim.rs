//! Deterministic rigid-body simulation with penalty ground contact.
//!
//! Integration is semi-implicit Euler. Contact damping is folded into the
//! velocity update implicitly: the light lower legs make explicit damping at
//! the default gains unstable at a 0.5 ms step.

use nalgebra::{Vector2, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dynamics::{actuation, base_wrench_generalized, compute_dynamics, DynamicsQuantities};
use crate::model::{GenMatrix, GenVector, GeneralizedState, JointVector, RobotModel, NUM_LEGS};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error("simulation diverged at t = {t:.4} s: {reason}")]
    Diverged { t: f64, reason: String },
    #[error("invalid simulation config: {0}")]
    Config(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GroundConfig {
    pub height: f64,
    /// Normal stiffness (N/m).
    pub k_n: f64,
    /// Normal damping (N·s/m).
    pub d_n: f64,
    pub mu: f64,
    /// Tangential stiffness (N/m).
    pub k_t: f64,
    /// Tangential damping (N·s/m).
    pub d_t: f64,
}

impl Default for GroundConfig {
    fn default() -> Self {
        Self {
            height: 0.0,
            k_n: 5e4,
            d_n: 500.0,
            mu: 0.7,
            k_t: 5e4,
            d_t: 500.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ActuatorConfig {
    /// Overrides the model limit when set.
    pub tau_max: Option<f64>,
    pub qd_max: Option<f64>,
    /// Ramp torque to zero between 0.9·q̇_max and q̇_max.
    pub velocity_limit: bool,
}

impl Default for ActuatorConfig {
    fn default() -> Self {
        Self {
            tau_max: None,
            qd_max: None,
            velocity_limit: true,
        }
    }
}

/// Constant world-frame force on the base origin over an interval.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Push {
    pub t_start: f64,
    pub duration: f64,
    pub force: [f64; 3],
}

impl Push {
    pub fn active(&self, t: f64) -> bool {
        t >= self.t_start && t < self.t_start + self.duration
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimConfig {
    pub dt: f64,
    pub ground: GroundConfig,
    pub actuator: ActuatorConfig,
    pub pushes: Vec<Push>,
    /// Generalized speed treated as divergence.
    pub max_speed: f64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            dt: 5e-4,
            ground: GroundConfig::default(),
            actuator: ActuatorConfig::default(),
            pushes: Vec::new(),
            max_speed: 1e3,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<(), SimError> {
        let g = &self.ground;
        let bad = |m: &str| Err(SimError::Config(m.to_string()));
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return bad("dt must be > 0");
        }
        if !(g.k_n > 0.0 && g.k_t > 0.0) {
            return bad("ground stiffnesses must be > 0");
        }
        if !(g.d_n >= 0.0 && g.d_t >= 0.0 && g.mu >= 0.0) {
            return bad("ground damping and friction must be >= 0");
        }
        if self.pushes.iter().any(|p| !(p.duration >= 0.0)) {
            return bad("push duration must be >= 0");
        }
        Ok(())
    }
}

/// Joint-level command consumed by the PD loop.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct JointCommand {
    pub tau_ff: JointVector,
    pub q_cmd: JointVector,
    pub qd_cmd: JointVector,
    pub kp: JointVector,
    pub kd: JointVector,
}

impl JointCommand {
    pub fn zero() -> Self {
        Self {
            tau_ff: JointVector::zeros(),
            q_cmd: JointVector::zeros(),
            qd_cmd: JointVector::zeros(),
            kp: JointVector::zeros(),
            kd: JointVector::zeros(),
        }
    }

    pub fn pd_torque(&self, state: &GeneralizedState) -> JointVector {
        self.tau_ff
            + self.kp.component_mul(&(self.q_cmd - state.joint_positions))
            + self.kd.component_mul(&(self.qd_cmd - state.joint_velocities))
    }
}

/// Stick anchors of the tangential springs; `None` while a foot is airborne.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ContactMemory {
    pub anchors: [Option<Vector2<f64>>; NUM_LEGS],
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimState {
    pub t: f64,
    pub steps: u64,
    pub robot: GeneralizedState,
    pub contact: ContactMemory,
}

impl SimState {
    pub fn new(robot: GeneralizedState) -> Self {
        Self {
            t: 0.0,
            steps: 0,
            robot,
            contact: ContactMemory::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepOutput {
    /// Torque after PD, clamping and velocity limiting.
    pub tau_applied: JointVector,
    /// Torque requested before limiting.
    pub tau_requested: JointVector,
    pub ground_forces: [Vector3<f64>; NUM_LEGS],
    pub in_contact: [bool; NUM_LEGS],
}

/// Explicit penalty force for one foot. Updates the stick anchor.
pub fn ground_contact_force(
    foot_pos: &Vector3<f64>,
    foot_vel: &Vector3<f64>,
    anchor: &mut Option<Vector2<f64>>,
    config: &GroundConfig,
) -> Vector3<f64> {
    let penetration = config.height - foot_pos.z;
    if penetration <= 0.0 {
        *anchor = None;
        return Vector3::zeros();
    }
    let normal = (config.k_n * penetration - config.d_n * foot_vel.z).max(0.0);
    let a = *anchor.get_or_insert(foot_pos.xy());
    let demand = -(foot_pos.xy() - a) * config.k_t - foot_vel.xy() * config.d_t;
    let tangential = coulomb_clamp(demand, normal * config.mu, foot_pos, anchor, config);
    Vector3::new(tangential.x, tangential.y, normal)
}

/// Clamp `demand` to `limit` and slide the anchor so the spring alone
/// would produce the clamped force.
fn coulomb_clamp(
    demand: Vector2<f64>,
    limit: f64,
    foot_pos: &Vector3<f64>,
    anchor: &mut Option<Vector2<f64>>,
    config: &GroundConfig,
) -> Vector2<f64> {
    let mag = demand.norm();
    if mag <= limit {
        return demand;
    }
    let clamped = if mag > 0.0 { demand * (limit / mag) } else { demand };
    *anchor = Some(foot_pos.xy() + clamped / config.k_t);
    clamped
}

/// Actuator model: symmetric torque clamp and a linear ramp to zero torque
/// in the direction of motion between 0.9·q̇_max and q̇_max.
pub fn limit_torque(tau: &JointVector, qd: &JointVector, tau_max: f64, qd_max: f64, velocity_limit: bool) -> JointVector {
    JointVector::from_fn(|i, _| {
        let mut t = tau[i].clamp(-tau_max, tau_max);
        if velocity_limit && t * qd[i] > 0.0 {
            let scale = ((qd_max - qd[i].abs()) / (0.1 * qd_max)).clamp(0.0, 1.0);
            t *= scale;
        }
        t
    })
}

#[derive(Clone, Copy, PartialEq)]
enum Mode {
    Free,
    /// Implicit normal damping; tangential spring-damper sticking.
    Stick,
    /// Implicit normal damping; tangential force fixed at the friction limit.
    Slide(Vector2<f64>),
}

/// Advance one step of `config.dt`.
pub fn step(
    model: &RobotModel,
    sim: &mut SimState,
    command: &JointCommand,
    config: &SimConfig,
) -> Result<StepOutput, SimError> {
    let dt = config.dt;
    let g = &config.ground;
    let state = &sim.robot;
    let d = compute_dynamics(model, state);

    let tau_max = config.actuator.tau_max.unwrap_or(model.torque_limit);
    let qd_max = config.actuator.qd_max.unwrap_or(model.velocity_limit);
    let tau_requested = command.pd_torque(state);
    let tau = limit_torque(&tau_requested, &state.joint_velocities, tau_max, qd_max, config.actuator.velocity_limit);

    let mut rhs = actuation(&tau) - d.coriolis - d.gravity;
    for p in config.pushes.iter().filter(|p| p.active(sim.t)) {
        rhs += base_wrench_generalized(state, &Vector3::from(p.force), &Vector3::zeros());
    }

    let qd = state.velocity();
    let mut modes = [Mode::Free; NUM_LEGS];
    let mut anchors = sim.contact.anchors;
    for foot in 0..NUM_LEGS {
        let p = d.foot_positions[foot];
        if p.z < g.height {
            let a = *anchors[foot].get_or_insert(p.xy());
            // explicit estimate decides the initial mode
            let v = d.foot_velocities[foot];
            let normal = (g.k_n * (g.height - p.z) - g.d_n * v.z).max(0.0);
            let demand = -(p.xy() - a) * g.k_t - v.xy() * g.d_t;
            modes[foot] = if demand.norm() <= g.mu * normal {
                Mode::Stick
            } else {
                Mode::Slide(if demand.norm() > 0.0 { demand / demand.norm() } else { Vector2::zeros() })
            };
        } else {
            anchors[foot] = None;
        }
    }

    let mut qd_next = qd;
    let mut forces = [Vector3::zeros(); NUM_LEGS];
    // mode changes are rare; a few passes settle them
    for _pass in 0..4 {
        qd_next = solve_velocity(&d, &qd, &rhs, &modes, &anchors, g, dt)?;
        let mut changed = false;
        for foot in 0..NUM_LEGS {
            if modes[foot] == Mode::Free {
                continue;
            }
            let p = d.foot_positions[foot];
            let v = d.contact_jacobians[foot] * qd_next;
            let normal_raw = g.k_n * (g.height - p.z) - g.d_n * v.z;
            let normal = normal_raw.max(0.0);
            let a = anchors[foot].expect("anchor set for contact");
            match modes[foot] {
                Mode::Stick => {
                    let tang = -(p.xy() - a) * g.k_t - v.xy() * g.d_t;
                    if tang.norm() > g.mu * normal + 1e-9 && normal_raw > 0.0 {
                        modes[foot] = Mode::Slide(tang / tang.norm());
                        changed = true;
                    }
                    forces[foot] = Vector3::new(tang.x, tang.y, normal);
                }
                Mode::Slide(dir) => {
                    let tang = dir * (g.mu * normal);
                    forces[foot] = Vector3::new(tang.x, tang.y, normal);
                }
                Mode::Free => unreachable!(),
            }
            if normal_raw < 0.0 {
                // separating faster than the spring pushes: release the foot
                modes[foot] = Mode::Free;
                forces[foot] = Vector3::zeros();
                changed = true;
            }
        }
        if !changed {
            break;
        }
    }

    let mut in_contact = [false; NUM_LEGS];
    for foot in 0..NUM_LEGS {
        match modes[foot] {
            Mode::Free => {
                forces[foot] = Vector3::zeros();
            }
            Mode::Stick => in_contact[foot] = true,
            Mode::Slide(_) => {
                in_contact[foot] = true;
                let p = d.foot_positions[foot];
                anchors[foot] = Some(p.xy() + forces[foot].xy() / g.k_t);
            }
        }
    }

    // semi-implicit: configuration advances with the new velocity
    let mut next = state.clone();
    next.set_velocity(&qd_next);
    next.integrate_configuration(&(qd_next * dt));

    if !next.is_finite() || qd_next.amax() > config.max_speed {
        return Err(SimError::Diverged {
            t: sim.t,
            reason: format!("generalized speed {:.3e}", qd_next.amax()),
        });
    }
    sim.robot = next;
    sim.contact.anchors = anchors;
    sim.steps += 1;
    sim.t = sim.steps as f64 * dt;
    Ok(StepOutput {
        tau_applied: tau,
        tau_requested,
        ground_forces: forces,
        in_contact,
    })
}

/// `(A + dt Σ Jᵀ D J) q̇⁺ = A q̇ + dt (rhs + Σ Jᵀ f_spring)`.
fn solve_velocity(
    d: &DynamicsQuantities,
    qd: &GenVector,
    rhs: &GenVector,
    modes: &[Mode; NUM_LEGS],
    anchors: &[Option<Vector2<f64>>; NUM_LEGS],
    g: &GroundConfig,
    dt: f64,
) -> Result<GenVector, SimError> {
    let mut lhs: GenMatrix = d.mass_matrix;
    let mut b = d.mass_matrix * qd + rhs * dt;
    for foot in 0..NUM_LEGS {
        let j = &d.contact_jacobians[foot];
        let p = d.foot_positions[foot];
        let pen = g.height - p.z;
        match modes[foot] {
            Mode::Free => {}
            Mode::Stick => {
                let a = anchors[foot].expect("anchor");
                let spring = Vector3::new(-(p.x - a.x) * g.k_t, -(p.y - a.y) * g.k_t, g.k_n * pen);
                let damping = Vector3::new(g.d_t, g.d_t, g.d_n);
                lhs += j.transpose() * nalgebra::Matrix3::from_diagonal(&damping) * j * dt;
                b += j.transpose() * spring * dt;
            }
            Mode::Slide(dir) => {
                // normal force k·pen − d·ż⁺ enters implicitly; tangential follows it
                let n = Vector3::new(g.mu * dir.x, g.mu * dir.y, 1.0);
                let jz = j.row(2);
                lhs += j.transpose() * n * jz * (g.d_n * dt);
                b += j.transpose() * n * (g.k_n * pen * dt);
            }
        }
    }
    lhs.lu().solve(&b).ok_or_else(|| SimError::Diverged {
        t: f64::NAN,
        reason: "singular velocity update".into(),
    })
}
