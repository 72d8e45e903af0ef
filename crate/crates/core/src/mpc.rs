//! Convex model-predictive control over a single rigid body.
//!
//! The body state is `x = [Θ; p; ω; ṗ]` with Z-Y-X Euler angles `Θ`, world
//! position `p`, world angular velocity `ω` and world linear velocity `ṗ`.
//! Dynamics are linearized about the commanded yaw and planned footholds,
//! states are eliminated by forward propagation, and the remaining QP over
//! stance-foot reaction forces is solved with the dual active-set solver.

use nalgebra::{DMatrix, DVector, Dyn, Matrix3, OMatrix, SMatrix, SVector, Vector3, U12};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::command::LocomotionCommand;
use crate::footstep::StepCommand;
use crate::gait::{build_contact_table, ContactTable, GaitSpec};
use crate::model::{GeneralizedState, RobotModel, NUM_LEGS};
use crate::qp::{self, QpError, QpProblem};
use crate::spatial::skew;

pub type BodyState = SVector<f64, 12>;
pub type BodyMatrix = SMatrix<f64, 12, 12>;

/// Largest pitch magnitude kept when extracting Euler angles.
const PITCH_CLAMP: f64 = 1.45;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MpcError {
    #[error("invalid MPC configuration: {0}")]
    Config(String),
    #[error("MPC QP failed: {0}")]
    Solver(#[from] QpError),
}

/// Force penalty: one weight for all axes or one per axis.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ForceWeight {
    Scalar(f64),
    Diagonal([f64; 3]),
}

impl ForceWeight {
    pub fn diagonal(&self) -> [f64; 3] {
        match *self {
            ForceWeight::Scalar(r) => [r; 3],
            ForceWeight::Diagonal(d) => d,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MpcConfig {
    pub horizon: usize,
    /// Step length (s). `None` spreads the horizon over one gait cycle.
    pub dt: Option<f64>,
    #[serde(rename = "Q")]
    pub q: [f64; 12],
    #[serde(rename = "R")]
    pub r: ForceWeight,
    pub mu: f64,
    pub fmin: f64,
    pub fmax: f64,
    pub rate_hz: f64,
}

impl Default for MpcConfig {
    fn default() -> Self {
        Self {
            horizon: 10,
            dt: None,
            q: [0.25, 0.25, 10.0, 2.0, 2.0, 50.0, 0.0, 0.0, 0.3, 0.2, 0.2, 0.1],
            r: ForceWeight::Scalar(1e-6),
            mu: 0.4,
            fmin: 0.0,
            fmax: 250.0,
            rate_hz: 40.0,
        }
    }
}

impl MpcConfig {
    pub fn validate(&self) -> Result<(), MpcError> {
        let err = |m: &str| Err(MpcError::Config(m.to_string()));
        if self.horizon == 0 {
            return err("horizon must be >= 1");
        }
        if let Some(dt) = self.dt {
            if !(dt > 0.0 && dt.is_finite()) {
                return err("dt must be > 0");
            }
        }
        if self.q.iter().any(|q| !(*q >= 0.0 && q.is_finite())) {
            return err("Q entries must be finite and >= 0");
        }
        if self.r.diagonal().iter().any(|r| !(*r > 0.0 && r.is_finite())) {
            return err("R entries must be > 0");
        }
        if !(self.mu > 0.0) {
            return err("mu must be > 0");
        }
        if !(self.fmin >= 0.0 && self.fmax > self.fmin) {
            return err("require 0 <= fmin < fmax");
        }
        if !(self.rate_hz > 0.0) {
            return err("rate_hz must be > 0");
        }
        Ok(())
    }

    pub fn step_dt(&self, gait: &GaitSpec) -> f64 {
        self.dt.unwrap_or(gait.cycle_duration / self.horizon as f64)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceTrajectory {
    pub dt: f64,
    /// Reference states for k = 0..=horizon.
    pub states: Vec<BodyState>,
    /// Commanded yaw per step.
    pub yaw: Vec<f64>,
    /// Contact moment arms per step, world frame, relative to the reference
    /// position. Filled by [`assign_moment_arms`].
    pub moment_arms: Vec<[Vector3<f64>; NUM_LEGS]>,
}

impl ReferenceTrajectory {
    pub fn horizon(&self) -> usize {
        self.states.len() - 1
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SolveStatus {
    Optimal,
    /// A previous solution reused after a solver failure.
    Stale,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MpcSolution {
    /// World-frame reaction forces per step and foot; exact zeros in swing.
    pub forces: Vec<[Vector3<f64>; NUM_LEGS]>,
    pub first_step_forces: [Vector3<f64>; NUM_LEGS],
    /// Rolled-out states for k = 1..=horizon.
    pub predicted_states: Vec<BodyState>,
    pub status: SolveStatus,
    pub objective: f64,
    pub num_variables: usize,
    pub qp_iterations: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Linearization {
    pub a: BodyMatrix,
    /// 12 × 3·(stance feet) input matrix.
    pub b: DMatrix<f64>,
    pub g_hat: BodyState,
    pub stance_feet: Vec<usize>,
}

pub fn rot_z(yaw: f64) -> Matrix3<f64> {
    let (s, c) = yaw.sin_cos();
    Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0)
}

/// Current body state in MPC coordinates. Pitch is clamped away from the
/// Euler singularity.
pub fn body_state(state: &GeneralizedState) -> BodyState {
    let mut rpy = state.euler_rpy();
    if rpy.y.abs() > PITCH_CLAMP {
        log::warn!("pitch {:.3} rad near Euler singularity; clamped", rpy.y);
        rpy.y = rpy.y.clamp(-PITCH_CLAMP, PITCH_CLAMP);
    }
    let omega_world = state.base_orientation * state.base_angular_velocity;
    let mut x = BodyState::zeros();
    x.fixed_rows_mut::<3>(0).copy_from(&rpy);
    x.fixed_rows_mut::<3>(3).copy_from(&state.base_position);
    x.fixed_rows_mut::<3>(6).copy_from(&omega_world);
    x.fixed_rows_mut::<3>(9).copy_from(&state.base_linear_velocity);
    x
}

/// Straight-line reference from the current planar position and yaw.
pub fn build_reference(state: &GeneralizedState, command: &LocomotionCommand, horizon: usize, dt: f64) -> ReferenceTrajectory {
    let yaw0 = state.euler_rpy().z;
    let p0 = state.base_position;
    let mut states = Vec::with_capacity(horizon + 1);
    let mut yaw = Vec::with_capacity(horizon + 1);
    for k in 0..=horizon {
        let t = k as f64 * dt;
        let psi = yaw0 + command.yaw_rate * t;
        let mut x = BodyState::zeros();
        x[2] = psi;
        x[3] = p0.x + command.velocity.x * t;
        x[4] = p0.y + command.velocity.y * t;
        x[5] = command.body_height;
        x[8] = command.yaw_rate;
        x[9] = command.velocity.x;
        x[10] = command.velocity.y;
        states.push(x);
        yaw.push(psi);
    }
    ReferenceTrajectory {
        dt,
        states,
        yaw,
        moment_arms: vec![[Vector3::zeros(); NUM_LEGS]; horizon + 1],
    }
}

/// Foot positions over the horizon: a foot keeps its current position until
/// it first lifts off, and sits at its planned target afterwards.
pub fn assign_moment_arms(
    reference: &mut ReferenceTrajectory,
    table: &ContactTable,
    foot_positions: &[Vector3<f64>; NUM_LEGS],
    steps: &StepCommand,
) {
    for foot in 0..NUM_LEGS {
        let mut lifted = !table.flags[0][foot];
        for k in 0..reference.moment_arms.len() {
            if k < table.flags.len() && !table.flags[k][foot] {
                lifted = true;
            }
            let pos = if lifted { steps.targets[foot] } else { foot_positions[foot] };
            reference.moment_arms[k][foot] = pos - reference.states[k].fixed_rows::<3>(3);
        }
    }
}

/// Discrete dynamics for one step. Columns exist only for stance feet.
pub fn linearize_step(
    mass: f64,
    body_inertia: &Matrix3<f64>,
    gravity: &Vector3<f64>,
    yaw: f64,
    contacts: &[bool; NUM_LEGS],
    moment_arms: &[Vector3<f64>; NUM_LEGS],
    dt: f64,
) -> Linearization {
    let rz = rot_z(yaw);
    let inertia_world = rz * body_inertia * rz.transpose();
    let inertia_inv = inertia_world
        .try_inverse()
        .expect("body inertia is positive definite");

    let mut a = BodyMatrix::identity();
    // Euler rates from world angular velocity for small roll and pitch
    a.fixed_view_mut::<3, 3>(0, 6).copy_from(&(rz.transpose() * dt));
    a.fixed_view_mut::<3, 3>(3, 9).copy_from(&(Matrix3::identity() * dt));

    let stance_feet: Vec<usize> = (0..NUM_LEGS).filter(|&i| contacts[i]).collect();
    let mut b = DMatrix::zeros(12, 3 * stance_feet.len());
    for (col, &foot) in stance_feet.iter().enumerate() {
        b.fixed_view_mut::<3, 3>(6, 3 * col)
            .copy_from(&(inertia_inv * skew(&moment_arms[foot]) * dt));
        b.fixed_view_mut::<3, 3>(9, 3 * col)
            .copy_from(&(Matrix3::identity() * (dt / mass)));
    }

    let mut g_hat = BodyState::zeros();
    g_hat.fixed_rows_mut::<3>(9).copy_from(&(gravity * dt));
    Linearization { a, b, g_hat, stance_feet }
}

/// Friction-pyramid and normal-force rows for one foot force `f`, written
/// as `C f + c >= 0`.
pub fn friction_rows(mu: f64, fmin: f64, fmax: f64) -> (SMatrix<f64, 6, 3>, SVector<f64, 6>) {
    #[rustfmt::skip]
    let c = SMatrix::<f64, 6, 3>::from_row_slice(&[
        0.0, 0.0, 1.0,
        0.0, 0.0, -1.0,
        -1.0, 0.0, mu,
        1.0, 0.0, mu,
        0.0, -1.0, mu,
        0.0, 1.0, mu,
    ]);
    let c0 = SVector::<f64, 6>::from_column_slice(&[-fmin, fmax, 0.0, 0.0, 0.0, 0.0]);
    (c, c0)
}

/// Eliminate states by forward propagation and solve for stance forces.
pub fn condense_and_solve(
    reference: &ReferenceTrajectory,
    linearizations: &[Linearization],
    config: &MpcConfig,
    x0: &BodyState,
) -> Result<MpcSolution, MpcError> {
    let m = linearizations.len();
    if m == 0 || reference.states.len() < m + 1 {
        return Err(MpcError::Config("reference shorter than horizon".into()));
    }
    let offsets: Vec<usize> = linearizations
        .iter()
        .scan(0, |acc, l| {
            let o = *acc;
            *acc += l.b.ncols();
            Some(o)
        })
        .collect();
    let nu: usize = linearizations.iter().map(|l| l.b.ncols()).sum();
    let q = BodyMatrix::from_diagonal(&BodyState::from_column_slice(&config.q));
    let r = config.r.diagonal();

    // x_{k+1} = phi x0 + gamma u + c
    let mut phi = BodyMatrix::identity();
    let mut gamma = OMatrix::<f64, U12, Dyn>::zeros(nu);
    let mut c = BodyState::zeros();
    let mut hessian = DMatrix::<f64>::zeros(nu, nu);
    let mut linear = DVector::<f64>::zeros(nu);
    for (k, lin) in linearizations.iter().enumerate() {
        phi = lin.a * phi;
        gamma = lin.a * gamma;
        let mut cols = gamma.columns_mut(offsets[k], lin.b.ncols());
        cols += &lin.b;
        c = lin.a * c + lin.g_hat;

        let err = phi * x0 + c - reference.states[k + 1];
        let qg = q * &gamma;
        hessian += gamma.transpose() * &qg;
        linear += qg.transpose() * err;
    }
    for (i, j) in (0..nu).enumerate() {
        hessian[(j, j)] += r[i % 3];
    }
    hessian *= 2.0;
    linear *= 2.0;
    // keep the hessian exactly symmetric
    let hessian = (&hessian + hessian.transpose()) * 0.5;

    let (cf, c0) = friction_rows(config.mu, config.fmin, config.fmax);
    let n_feet = nu / 3;
    let mut ci = DMatrix::zeros(6 * n_feet, nu);
    let mut ci0 = DVector::zeros(6 * n_feet);
    for j in 0..n_feet {
        ci.view_mut((6 * j, 3 * j), (6, 3)).copy_from(&cf);
        ci0.rows_mut(6 * j, 6).copy_from(&c0);
    }

    let (u, objective, iterations) = if nu == 0 {
        (DVector::zeros(0), 0.0, 0)
    } else {
        let problem = QpProblem::new(hessian, linear).with_inequalities(ci, ci0);
        let sol = qp::solve(&problem)?;
        (sol.x, sol.objective, sol.iterations)
    };

    let mut forces = Vec::with_capacity(m);
    let mut predicted = Vec::with_capacity(m);
    let mut x = *x0;
    for (k, lin) in linearizations.iter().enumerate() {
        let mut step = [Vector3::zeros(); NUM_LEGS];
        for (col, &foot) in lin.stance_feet.iter().enumerate() {
            let o = offsets[k] + 3 * col;
            step[foot] = Vector3::new(u[o], u[o + 1], u[o + 2]);
        }
        let uk = u.rows(offsets[k], lin.b.ncols());
        let bu = &lin.b * uk;
        x = lin.a * x + BodyState::from_column_slice(bu.as_slice()) + lin.g_hat;
        predicted.push(x);
        forces.push(step);
    }

    Ok(MpcSolution {
        first_step_forces: forces[0],
        forces,
        predicted_states: predicted,
        status: SolveStatus::Optimal,
        objective,
        num_variables: nu,
        qp_iterations: iterations,
    })
}

/// Lumped mass used by the MPC: all links.
pub fn lumped_mass(model: &RobotModel) -> f64 {
    model.links.iter().map(|l| l.mass).sum()
}

/// One MPC update. On solver failure a previous solution, if given, is
/// returned with [`SolveStatus::Stale`].
#[allow(clippy::too_many_arguments)]
pub fn mpc_tick(
    model: &RobotModel,
    state: &GeneralizedState,
    foot_positions: &[Vector3<f64>; NUM_LEGS],
    command: &LocomotionCommand,
    gait: &GaitSpec,
    t: f64,
    steps: &StepCommand,
    config: &MpcConfig,
    previous: Option<&MpcSolution>,
) -> Result<MpcSolution, MpcError> {
    config.validate()?;
    let dt = config.step_dt(gait);
    let table = build_contact_table(gait, t, config.horizon, dt);
    let mut reference = build_reference(state, command, config.horizon, dt);
    assign_moment_arms(&mut reference, &table, foot_positions, steps);
    let mass = lumped_mass(model);
    let linearizations: Vec<Linearization> = (0..config.horizon)
        .map(|k| {
            linearize_step(
                mass,
                &model.body_inertia,
                &model.gravity,
                reference.yaw[k],
                &table.flags[k],
                &reference.moment_arms[k],
                dt,
            )
        })
        .collect();
    match condense_and_solve(&reference, &linearizations, config, &body_state(state)) {
        Ok(sol) => Ok(sol),
        Err(e) => match previous {
            Some(prev) => {
                log::warn!("MPC solve failed ({e}); reusing previous solution");
                let mut stale = prev.clone();
                stale.status = SolveStatus::Stale;
                Ok(stale)
            }
            None => Err(e),
        },
    }
}
