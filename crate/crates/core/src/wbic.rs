//! Whole-body impulse control.
//!
//! Prioritized task execution in the null space of the stance contacts
//! produces joint position, velocity and acceleration commands. A small QP
//! then relaxes the floating-base acceleration and the MPC reaction forces so
//! the floating-base rows of the full dynamics hold exactly, and joint torques
//! follow from inverse dynamics.

use nalgebra::{DMatrix, DVector, UnitQuaternion, Vector3, Vector6};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dynamics::DynamicsQuantities;
use crate::model::{GenMatrix, GenVector, GeneralizedState, JointVector, RobotModel, BASE_DOF, NUM_DOF, NUM_JOINTS, NUM_LEGS};
use crate::qp::{self, QpError, QpProblem};

/// Singular values below this fraction of the largest are dropped.
pub const PINV_RELATIVE_TOL: f64 = 1e-6;
const QP_REGULARIZATION: f64 = 1e-8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum WbicError {
    #[error("relaxation QP failed: {0}")]
    Qp(#[from] QpError),
    #[error("mass matrix is not positive definite")]
    MassMatrix,
    #[error("non-finite WBIC output")]
    NonFinite,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Task {
    pub label: String,
    pub jacobian: DMatrix<f64>,
    /// `J̇ q̇`.
    pub drift: DVector<f64>,
    /// Position error `x_des − x`.
    pub error: DVector<f64>,
    /// Current task velocity `J q̇`.
    pub velocity: DVector<f64>,
    pub vel_des: DVector<f64>,
    pub acc_des: DVector<f64>,
    pub kp: DVector<f64>,
    pub kd: DVector<f64>,
}

impl Task {
    pub fn dim(&self) -> usize {
        self.jacobian.nrows()
    }

    /// PD acceleration command.
    pub fn acceleration_command(&self) -> DVector<f64> {
        &self.acc_des + self.kp.component_mul(&self.error) + self.kd.component_mul(&(&self.vel_des - &self.velocity))
    }

    /// Body orientation task on the base angular rows (body frame). The error
    /// is the rotation logarithm of `R⁻¹ R_des`.
    pub fn body_orientation(
        state: &GeneralizedState,
        desired: &UnitQuaternion<f64>,
        omega_des_world: &Vector3<f64>,
        alpha_des_world: &Vector3<f64>,
        gains: [f64; 2],
    ) -> Self {
        let mut j = DMatrix::zeros(3, NUM_DOF);
        j.view_mut((0, 0), (3, 3)).fill_with_identity();
        let inv = state.base_orientation.inverse();
        let err = (inv * desired).scaled_axis();
        Self::from_parts(
            "body_orientation",
            j,
            Vector3::zeros(),
            err,
            state.base_angular_velocity,
            inv * omega_des_world,
            inv * alpha_des_world,
            gains,
        )
    }

    /// Body position task on the base linear rows (world frame).
    pub fn body_position(
        state: &GeneralizedState,
        p_des: &Vector3<f64>,
        v_des: &Vector3<f64>,
        a_des: &Vector3<f64>,
        gains: [f64; 2],
    ) -> Self {
        let mut j = DMatrix::zeros(3, NUM_DOF);
        j.view_mut((0, 3), (3, 3)).fill_with_identity();
        Self::from_parts(
            "body_position",
            j,
            Vector3::zeros(),
            p_des - state.base_position,
            state.base_linear_velocity,
            *v_des,
            *a_des,
            gains,
        )
    }

    /// World-frame foot position task.
    pub fn foot_position(
        dynamics: &DynamicsQuantities,
        foot: usize,
        p_des: &Vector3<f64>,
        v_des: &Vector3<f64>,
        a_des: &Vector3<f64>,
        gains: [f64; 2],
    ) -> Self {
        let j = DMatrix::from_fn(3, NUM_DOF, |r, c| dynamics.contact_jacobians[foot][(r, c)]);
        let mut t = Self::from_parts(
            "foot_position",
            j,
            dynamics.contact_drifts[foot],
            p_des - dynamics.foot_positions[foot],
            dynamics.foot_velocities[foot],
            *v_des,
            *a_des,
            gains,
        );
        t.label = format!("foot_position_{foot}");
        t
    }

    #[allow(clippy::too_many_arguments)]
    fn from_parts(
        label: &str,
        jacobian: DMatrix<f64>,
        drift: Vector3<f64>,
        error: Vector3<f64>,
        velocity: Vector3<f64>,
        vel_des: Vector3<f64>,
        acc_des: Vector3<f64>,
        gains: [f64; 2],
    ) -> Self {
        let v = |x: Vector3<f64>| DVector::from_column_slice(x.as_slice());
        Self {
            label: label.to_string(),
            jacobian,
            drift: v(drift),
            error: v(error),
            velocity: v(velocity),
            vel_des: v(vel_des),
            acc_des: v(acc_des),
            kp: DVector::from_element(3, gains[0]),
            kd: DVector::from_element(3, gains[1]),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskGains {
    pub ori: [f64; 2],
    pub pos: [f64; 2],
    pub foot: [f64; 2],
}

impl Default for TaskGains {
    fn default() -> Self {
        Self {
            ori: [100.0, 10.0],
            pos: [100.0, 10.0],
            foot: [100.0, 10.0],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JointPdGains {
    pub kp: f64,
    pub kd: f64,
    pub abd_kd: f64,
}

impl Default for JointPdGains {
    fn default() -> Self {
        Self {
            kp: 3.0,
            kd: 0.3,
            abd_kd: 1.0,
        }
    }
}

impl JointPdGains {
    pub fn kd_for(&self, joint: usize) -> f64 {
        if RobotModel::is_abduction(joint) {
            self.abd_kd
        } else {
            self.kd
        }
    }
}

/// How the contact-consistent acceleration seed is formed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum DriftSeed {
    /// `−J̇_c q̇`: cancels the contact point acceleration bias.
    #[default]
    JacobianRate,
    /// `−J_c q̇`: the contact velocity itself.
    ContactVelocity,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WbicConfig {
    #[serde(rename = "Q1")]
    pub q1: f64,
    #[serde(rename = "Q2")]
    pub q2: f64,
    pub task_gains: TaskGains,
    pub joint_pd: JointPdGains,
    pub mu: f64,
    pub drift_seed: DriftSeed,
}

impl Default for WbicConfig {
    fn default() -> Self {
        Self {
            q1: 1.0,
            q2: 0.1,
            task_gains: TaskGains::default(),
            joint_pd: JointPdGains::default(),
            mu: 0.4,
            drift_seed: DriftSeed::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WbicOutput {
    pub tau: JointVector,
    pub q_cmd: JointVector,
    pub qd_cmd: JointVector,
    /// Resolved reaction forces; zero for swing feet.
    pub forces: [Vector3<f64>; NUM_LEGS],
    pub delta_f: Vector6<f64>,
    pub delta_fr: DVector<f64>,
    pub qdd: GenVector,
    /// Task-space acceleration command before relaxation.
    pub qdd_cmd: GenVector,
    /// Floating-base rows of the inverse dynamics; zero up to QP tolerance.
    pub base_residual: Vector6<f64>,
}

/// Pseudo-inverse with relative truncation of singular values.
///
/// Built from the symmetric eigendecomposition of the smaller Gram matrix.
/// nalgebra's bidiagonal SVD occasionally stops short of convergence on
/// stacked contact Jacobians (reconstruction errors near 1e-2), while the
/// symmetric solver stays at round-off.
pub fn pinv(m: &DMatrix<f64>) -> DMatrix<f64> {
    if m.is_empty() {
        return DMatrix::zeros(m.ncols(), m.nrows());
    }
    let wide = m.nrows() <= m.ncols();
    let gram = if wide { m * m.transpose() } else { m.transpose() * m };
    let eig = gram.symmetric_eigen();
    let lmax = eig.eigenvalues.max();
    if lmax <= 0.0 {
        return DMatrix::zeros(m.ncols(), m.nrows());
    }
    // eigenvalues are squared singular values
    let cutoff = lmax * PINV_RELATIVE_TOL * PINV_RELATIVE_TOL;
    let inv = eig.eigenvalues.map(|l| if l > cutoff { 1.0 / l } else { 0.0 });
    let gram_inv = &eig.eigenvectors * DMatrix::from_diagonal(&inv) * eig.eigenvectors.transpose();
    if wide {
        m.transpose() * gram_inv
    } else {
        gram_inv * m.transpose()
    }
}

/// `A⁻¹Jᵀ(J A⁻¹ Jᵀ)⁻¹`, with the inner inverse taken as a truncated
/// pseudo-inverse when it is singular.
pub fn dyn_consistent_inverse(j: &DMatrix<f64>, a_inv: &DMatrix<f64>) -> DMatrix<f64> {
    let ainv_jt = a_inv * j.transpose();
    let lambda_inv = j * &ainv_jt;
    let lambda = match lambda_inv.clone().cholesky() {
        Some(c) if rcond_ok(&lambda_inv) => c.inverse(),
        _ => {
            log::debug!("singular task inertia; using truncated pseudo-inverse");
            pinv(&lambda_inv)
        }
    };
    ainv_jt * lambda
}

fn rcond_ok(m: &DMatrix<f64>) -> bool {
    let ev = m.clone().symmetric_eigenvalues();
    ev.min() > ev.max() * PINV_RELATIVE_TOL
}

/// Stack stance-foot contact Jacobians.
pub fn stacked_contact_jacobian(dynamics: &DynamicsQuantities, contacts: &[bool; NUM_LEGS]) -> (DMatrix<f64>, DVector<f64>) {
    let feet: Vec<usize> = (0..NUM_LEGS).filter(|&i| contacts[i]).collect();
    let mut jc = DMatrix::zeros(3 * feet.len(), NUM_DOF);
    let mut drift = DVector::zeros(3 * feet.len());
    for (k, &foot) in feet.iter().enumerate() {
        jc.view_mut((3 * k, 0), (3, NUM_DOF))
            .copy_from(&dynamics.contact_jacobians[foot]);
        drift.rows_mut(3 * k, 3).copy_from(&dynamics.contact_drifts[foot]);
    }
    (jc, drift)
}

fn identity() -> DMatrix<f64> {
    DMatrix::identity(NUM_DOF, NUM_DOF)
}

/// Position and velocity recursion with SVD pseudo-inverses.
pub fn kinematics_pass(tasks: &[Task], jc: &DMatrix<f64>) -> (DVector<f64>, DVector<f64>) {
    let mut n = if jc.nrows() == 0 { identity() } else { identity() - pinv(jc) * jc };
    let mut dq = DVector::zeros(NUM_DOF);
    let mut qd = DVector::zeros(NUM_DOF);
    for task in tasks {
        let j = &task.jacobian;
        let j_pre = j * &n;
        // equal to pinv(j_pre) in exact arithmetic; the extra projection
        // keeps round-off from leaking into the contact directions
        let j_pre_inv = &n * pinv(&j_pre);
        dq += &j_pre_inv * (&task.error - j * &dq);
        qd += &j_pre_inv * (&task.vel_des - j * &qd);
        n = &n * (identity() - &j_pre_inv * &j_pre);
    }
    (dq, qd)
}

/// Acceleration recursion with dynamically consistent inverses.
pub fn acceleration_pass(
    tasks: &[Task],
    jc: &DMatrix<f64>,
    contact_seed: &DVector<f64>,
    mass_matrix: &GenMatrix,
) -> Result<DVector<f64>, WbicError> {
    let a_inv = mass_matrix.cholesky().ok_or(WbicError::MassMatrix)?.inverse();
    let a_inv = DMatrix::from_fn(NUM_DOF, NUM_DOF, |r, c| a_inv[(r, c)]);
    let (mut qdd, mut n) = if jc.nrows() == 0 {
        (DVector::zeros(NUM_DOF), identity())
    } else {
        let jc_bar = dyn_consistent_inverse(jc, &a_inv);
        (&jc_bar * (-contact_seed), identity() - &jc_bar * jc)
    };
    for task in tasks {
        let j = &task.jacobian;
        let j_pre = j * &n;
        let j_pre_bar = dyn_consistent_inverse(&j_pre, &a_inv);
        qdd += &j_pre_bar * (task.acceleration_command() - &task.drift - j * &qdd);
        n = &n * (identity() - &j_pre_bar * &j_pre);
    }
    Ok(qdd)
}

/// Homogeneous friction-pyramid rows `W f ≥ 0` for one foot.
fn pyramid(mu: f64) -> DMatrix<f64> {
    #[rustfmt::skip]
    let w = DMatrix::from_row_slice(5, 3, &[
        0.0, 0.0, 1.0,
        -1.0, 0.0, mu,
        1.0, 0.0, mu,
        0.0, -1.0, mu,
        0.0, 1.0, mu,
    ]);
    w
}

#[derive(Debug, Clone, PartialEq)]
pub struct Relaxation {
    pub qdd: GenVector,
    pub forces: DVector<f64>,
    pub delta_f: Vector6<f64>,
    pub delta_fr: DVector<f64>,
}

/// Minimal relaxation of the base acceleration and reaction forces that
/// satisfies the floating-base dynamics and the friction pyramids.
pub fn relaxation_qp(
    qdd_cmd: &GenVector,
    f_mpc: &DVector<f64>,
    jc: &DMatrix<f64>,
    dynamics: &DynamicsQuantities,
    config: &WbicConfig,
) -> Result<Relaxation, WbicError> {
    let nf = f_mpc.len();
    assert_eq!(nf, jc.nrows(), "one MPC force per stance contact row");
    let n = BASE_DOF + nf;
    let a = &dynamics.mass_matrix;

    let mut h = DMatrix::zeros(n, n);
    for i in 0..n {
        let w = if i < BASE_DOF { config.q2 } else { config.q1 };
        h[(i, i)] = 2.0 * w + QP_REGULARIZATION;
    }

    // A_ff δ_f − J_c,fᵀ δ_fr + S_f(A q̈_cmd + b + g − J_cᵀ f_mpc) = 0
    let mut ce = DMatrix::zeros(BASE_DOF, n);
    ce.view_mut((0, 0), (BASE_DOF, BASE_DOF))
        .copy_from(&a.fixed_view::<6, 6>(0, 0));
    let jc_base_t = jc.columns(0, BASE_DOF).transpose();
    ce.view_mut((0, BASE_DOF), (BASE_DOF, nf)).copy_from(&(-&jc_base_t));
    let inv_dyn = a * qdd_cmd + dynamics.coriolis + dynamics.gravity;
    let ce0 = DVector::from_fn(BASE_DOF, |i, _| inv_dyn[i]) - &jc_base_t * f_mpc;

    // W (f_mpc + δ_fr) ≥ 0
    let nc = nf / 3;
    let w = pyramid(config.mu);
    let mut ci = DMatrix::zeros(5 * nc, n);
    let mut ci0 = DVector::zeros(5 * nc);
    for k in 0..nc {
        ci.view_mut((5 * k, BASE_DOF + 3 * k), (5, 3)).copy_from(&w);
        ci0.rows_mut(5 * k, 5).copy_from(&(&w * f_mpc.rows(3 * k, 3)));
    }

    let problem = QpProblem::new(h, DVector::zeros(n))
        .with_equalities(ce, ce0)
        .with_inequalities(ci, ci0);
    let sol = qp::solve(&problem)?;
    let delta_f = Vector6::from_fn(|i, _| sol.x[i]);
    let delta_fr = sol.x.rows(BASE_DOF, nf).into_owned();
    let mut qdd = *qdd_cmd;
    for i in 0..BASE_DOF {
        qdd[i] += delta_f[i];
    }
    Ok(Relaxation {
        qdd,
        forces: f_mpc + &delta_fr,
        delta_f,
        delta_fr,
    })
}

/// `A q̈ + b + g − J_cᵀ f`, split into base and joint rows.
pub fn torque_extraction(
    qdd: &GenVector,
    forces: &DVector<f64>,
    jc: &DMatrix<f64>,
    dynamics: &DynamicsQuantities,
) -> (Vector6<f64>, JointVector) {
    let contact = jc.transpose() * forces;
    let full = dynamics.mass_matrix * qdd + dynamics.coriolis + dynamics.gravity
        - GenVector::from_column_slice(contact.as_slice());
    (
        full.fixed_rows::<6>(0).into_owned(),
        full.fixed_rows::<NUM_JOINTS>(BASE_DOF).into_owned(),
    )
}

/// Full WBIC update. `mpc_forces` holds one world-frame force per foot;
/// entries for swing feet are ignored.
pub fn wbic_tick(
    state: &GeneralizedState,
    dynamics: &DynamicsQuantities,
    contacts: &[bool; NUM_LEGS],
    mpc_forces: &[Vector3<f64>; NUM_LEGS],
    tasks: &[Task],
    config: &WbicConfig,
) -> Result<WbicOutput, WbicError> {
    let (jc, jc_drift) = stacked_contact_jacobian(dynamics, contacts);
    let seed = match config.drift_seed {
        DriftSeed::JacobianRate => jc_drift,
        DriftSeed::ContactVelocity => &jc * state.velocity(),
    };
    let (dq, qd) = kinematics_pass(tasks, &jc);
    let qdd_cmd = acceleration_pass(tasks, &jc, &seed, &dynamics.mass_matrix)?;
    let qdd_cmd = GenVector::from_column_slice(qdd_cmd.as_slice());

    let feet: Vec<usize> = (0..NUM_LEGS).filter(|&i| contacts[i]).collect();
    let f_mpc = DVector::from_iterator(3 * feet.len(), feet.iter().flat_map(|&i| mpc_forces[i].iter().copied()));
    let relax = relaxation_qp(&qdd_cmd, &f_mpc, &jc, dynamics, config)?;
    let (base_residual, tau) = torque_extraction(&relax.qdd, &relax.forces, &jc, dynamics);

    let mut forces = [Vector3::zeros(); NUM_LEGS];
    for (k, &foot) in feet.iter().enumerate() {
        forces[foot] = Vector3::new(relax.forces[3 * k], relax.forces[3 * k + 1], relax.forces[3 * k + 2]);
    }
    let out = WbicOutput {
        tau,
        q_cmd: state.joint_positions + JointVector::from_fn(|i, _| dq[BASE_DOF + i]),
        qd_cmd: JointVector::from_fn(|i, _| qd[BASE_DOF + i]),
        forces,
        delta_f: relax.delta_f,
        delta_fr: relax.delta_fr,
        qdd: relax.qdd,
        qdd_cmd,
        base_residual,
    };
    let finite = out.tau.iter().chain(out.q_cmd.iter()).chain(out.qd_cmd.iter()).all(|v| v.is_finite());
    if !finite {
        return Err(WbicError::NonFinite);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::compute_dynamics;
    use crate::model::neutral_state;

    #[test]
    fn zero_errors_give_zero_kinematic_commands() {
        let model = RobotModel::bundled();
        let s = neutral_state(&model);
        let d = compute_dynamics(&model, &s);
        let tasks = vec![
            Task::body_orientation(&s, &s.base_orientation, &Vector3::zeros(), &Vector3::zeros(), [100.0, 10.0]),
            Task::body_position(&s, &s.base_position, &Vector3::zeros(), &Vector3::zeros(), [100.0, 10.0]),
        ];
        let (jc, _) = stacked_contact_jacobian(&d, &[true; 4]);
        let (dq, qd) = kinematics_pass(&tasks, &jc);
        assert!(dq.amax() < 1e-15 && qd.amax() < 1e-15);
    }

    #[test]
    fn single_task_no_contact_is_pinv() {
        let j = DMatrix::from_fn(3, NUM_DOF, |r, c| ((r * 7 + c * 3) % 5) as f64 - 2.0 + if c == r + 6 { 3.0 } else { 0.0 });
        let e = DVector::from_vec(vec![0.1, -0.2, 0.05]);
        let task = Task {
            label: "t".into(),
            jacobian: j.clone(),
            drift: DVector::zeros(3),
            error: e.clone(),
            velocity: DVector::zeros(3),
            vel_des: DVector::zeros(3),
            acc_des: DVector::zeros(3),
            kp: DVector::zeros(3),
            kd: DVector::zeros(3),
        };
        let (dq, _) = kinematics_pass(&[task], &DMatrix::zeros(0, NUM_DOF));
        assert!((dq - pinv(&j) * e).amax() < 1e-14);
    }

    #[test]
    fn identity_task_passes_acceleration_through() {
        let model = RobotModel::bundled();
        let s = neutral_state(&model);
        let d = compute_dynamics(&model, &s);
        let acc = DVector::from_fn(NUM_DOF, |i, _| (i as f64 * 0.37).sin());
        let task = Task {
            label: "all".into(),
            jacobian: DMatrix::identity(NUM_DOF, NUM_DOF),
            drift: DVector::zeros(NUM_DOF),
            error: DVector::zeros(NUM_DOF),
            velocity: DVector::zeros(NUM_DOF),
            vel_des: DVector::zeros(NUM_DOF),
            acc_des: acc.clone(),
            kp: DVector::zeros(NUM_DOF),
            kd: DVector::zeros(NUM_DOF),
        };
        let qdd = acceleration_pass(&[task], &DMatrix::zeros(0, NUM_DOF), &DVector::zeros(0), &d.mass_matrix).unwrap();
        assert!((qdd - acc).amax() < 1e-10);
    }

    #[test]
    fn config_defaults_and_json() {
        let c = WbicConfig::default();
        assert_eq!((c.q1, c.q2), (1.0, 0.1));
        assert_eq!(c.joint_pd.kd_for(0), 1.0);
        assert_eq!(c.joint_pd.kd_for(1), 0.3);
        let parsed: WbicConfig =
            serde_json::from_str(r#"{"Q1": 2.0, "task_gains": {"ori": [50, 5], "pos": [100, 10], "foot": [100, 10]}}"#).unwrap();
        assert_eq!(parsed.q1, 2.0);
        assert_eq!(parsed.q2, 0.1);
        assert_eq!(parsed.task_gains.ori, [50.0, 5.0]);
    }
}
