//! Floating-base rigid-body dynamics.
//!
//! The equations of motion are
//!
//! ```text
//!     A(q) qdd + b(q, qd) + g(q) = [0_6; tau] + Σ Jc_iᵀ f_i
//! ```
//!
//! with `A` from the composite-rigid-body algorithm plus reflected rotor
//! inertia on the joint diagonal, and `b`, `g` from recursive Newton-Euler.
//! Contact Jacobians map `qd` to world-frame foot point velocities.

use nalgebra::{Matrix3, Matrix6, SMatrix, UnitQuaternion, Vector3, Vector6};
use thiserror::Error;

use crate::model::{
    GenMatrix, GenVector, GeneralizedState, JointVector, RobotModel, BASE_DOF, NUM_DOF,
    NUM_JOINTS, NUM_LEGS,
};
use crate::spatial::{
    angular, cross_force, cross_motion, linear, skew, spatial_inertia, stack, Transform,
};

pub type ContactJacobian = SMatrix<f64, 3, NUM_DOF>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DynamicsError {
    #[error("foot index {0} out of range (expected 0..4)")]
    FootIndex(usize),
    #[error("mass matrix is not positive definite")]
    SingularMassMatrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DynamicsQuantities {
    /// Generalized mass matrix `A` (includes reflected rotor inertia).
    pub mass_matrix: GenMatrix,
    /// Coriolis and centrifugal force `b`.
    pub coriolis: GenVector,
    /// Gravity force `g`.
    pub gravity: GenVector,
    pub contact_jacobians: [ContactJacobian; NUM_LEGS],
    /// `J̇c qd` per foot.
    pub contact_drifts: [Vector3<f64>; NUM_LEGS],
    pub foot_positions: [Vector3<f64>; NUM_LEGS],
    pub foot_velocities: [Vector3<f64>; NUM_LEGS],
}

/// Per-link kinematic quantities shared by every algorithm here.
struct Kinematics {
    /// parent → link; for the base, world → base.
    x_up: Vec<Transform>,
    /// world → link.
    x_world: Vec<Transform>,
    /// Joint motion subspace in link coordinates (unused for the base).
    subspace: Vec<Vector6<f64>>,
    vel: Vec<Vector6<f64>>,
    /// Link acceleration at `qdd = 0` without gravity.
    bias_acc: Vec<Vector6<f64>>,
}

fn joint_rate(state: &GeneralizedState, link: usize) -> f64 {
    state.joint_velocities[link - 1]
}

fn kinematics(model: &RobotModel, state: &GeneralizedState) -> Kinematics {
    let n = model.num_links();
    let mut x_up = Vec::with_capacity(n);
    let mut x_world: Vec<Transform> = Vec::with_capacity(n);
    let mut subspace = Vec::with_capacity(n);
    let mut vel: Vec<Vector6<f64>> = Vec::with_capacity(n);
    let mut bias_acc: Vec<Vector6<f64>> = Vec::with_capacity(n);

    let r = state.rotation();
    let base = Transform::new(r.transpose(), state.base_position);
    let v_lin_body = r.transpose() * state.base_linear_velocity;
    let w = state.base_angular_velocity;
    x_up.push(base);
    x_world.push(base);
    subspace.push(Vector6::zeros());
    vel.push(stack(&w, &v_lin_body));
    bias_acc.push(stack(&Vector3::zeros(), &(-w.cross(&v_lin_body))));

    for (i, link) in model.links.iter().enumerate().skip(1) {
        let p = link.parent.expect("non-base link has a parent");
        let q = state.joint_positions[i - 1];
        let joint_rot = UnitQuaternion::from_scaled_axis(link.joint_axis * q)
            .to_rotation_matrix()
            .into_inner();
        let origin_rot = link.joint_origin.rotation.to_rotation_matrix().into_inner();
        let tree = Transform::new(origin_rot.transpose(), link.joint_origin.translation.vector);
        let joint = Transform::new(joint_rot.transpose(), Vector3::zeros());
        let xu = joint.compose(&tree);
        let s = stack(&link.joint_axis, &Vector3::zeros());
        let vj = s * joint_rate(state, i);
        let v = xu.apply_motion(&vel[p]) + vj;
        let a = xu.apply_motion(&bias_acc[p]) + cross_motion(&v, &vj);
        x_world.push(xu.compose(&x_world[p]));
        x_up.push(xu);
        subspace.push(s);
        vel.push(v);
        bias_acc.push(a);
    }
    Kinematics {
        x_up,
        x_world,
        subspace,
        vel,
        bias_acc,
    }
}

fn link_inertias(model: &RobotModel) -> Vec<Matrix6<f64>> {
    model
        .links
        .iter()
        .map(|l| spatial_inertia(l.mass, &l.com, &l.inertia))
        .collect()
}

/// Base generalized force from a spatial force on the base link:
/// body-frame moment and world-frame force.
fn base_force(r: &Matrix3<f64>, f: &Vector6<f64>) -> Vector6<f64> {
    stack(&angular(f), &(r * linear(f)))
}

/// Inverse dynamics by recursive Newton-Euler.
fn rnea(
    model: &RobotModel,
    state: &GeneralizedState,
    kin: &Kinematics,
    inertias: &[Matrix6<f64>],
    qdd: &GenVector,
    with_velocity: bool,
    with_gravity: bool,
) -> GenVector {
    let n = model.num_links();
    let r = state.rotation();
    let mut acc = vec![Vector6::zeros(); n];
    let mut force = vec![Vector6::zeros(); n];
    let zero = Vector6::zeros();
    let vel = |i: usize| if with_velocity { kin.vel[i] } else { zero };

    let wd = qdd.fixed_rows::<3>(0).into_owned();
    let vd = qdd.fixed_rows::<3>(3).into_owned();
    let mut a0 = stack(&wd, &(r.transpose() * vd));
    if with_velocity {
        a0 += kin.bias_acc[0];
    }
    if with_gravity {
        a0 += stack(&Vector3::zeros(), &(-(r.transpose() * model.gravity)));
    }
    acc[0] = a0;
    for i in 1..n {
        let p = model.links[i].parent.unwrap();
        let s = kin.subspace[i];
        let mut a = kin.x_up[i].apply_motion(&acc[p]) + s * qdd[RobotModel::dof_of_link(i)];
        if with_velocity {
            a += cross_motion(&kin.vel[i], &(s * joint_rate(state, i)));
        }
        acc[i] = a;
    }
    for i in 0..n {
        let v = vel(i);
        force[i] = inertias[i] * acc[i] + cross_force(&v, &(inertias[i] * v));
    }
    let mut tau = GenVector::zeros();
    for i in (1..n).rev() {
        let p = model.links[i].parent.unwrap();
        tau[RobotModel::dof_of_link(i)] = kin.subspace[i].dot(&force[i]);
        let fp = kin.x_up[i].transpose_apply_force(&force[i]);
        force[p] += fp;
    }
    tau.fixed_rows_mut::<6>(0)
        .copy_from(&base_force(&r, &force[0]));
    tau
}

/// Composite-rigid-body mass matrix with reflected rotor inertia.
fn crba(
    model: &RobotModel,
    state: &GeneralizedState,
    kin: &Kinematics,
    inertias: &[Matrix6<f64>],
) -> GenMatrix {
    let n = model.num_links();
    let r = state.rotation();
    let mut ic: Vec<Matrix6<f64>> = inertias.to_vec();
    for i in (1..n).rev() {
        let p = model.links[i].parent.unwrap();
        let x = kin.x_up[i].to_matrix();
        let contrib = x.transpose() * ic[i] * x;
        ic[p] += contrib;
    }
    let mut h = GenMatrix::zeros();
    for i in 1..n {
        let di = RobotModel::dof_of_link(i);
        let mut f = ic[i] * kin.subspace[i];
        h[(di, di)] = kin.subspace[i].dot(&f) + model.links[i].rotor_inertia;
        let mut j = i;
        while let Some(p) = model.links[j].parent {
            f = kin.x_up[j].transpose_apply_force(&f);
            j = p;
            if j == 0 {
                let fb = base_force(&r, &f);
                for k in 0..BASE_DOF {
                    h[(k, di)] = fb[k];
                    h[(di, k)] = fb[k];
                }
            } else {
                let dj = RobotModel::dof_of_link(j);
                let val = kin.subspace[j].dot(&f);
                h[(dj, di)] = val;
                h[(di, dj)] = val;
            }
        }
    }
    // base block: S_bᵀ Ic S_b with S_b = blockdiag(I, Rᵀ)
    let mut sb = Matrix6::zeros();
    sb.fixed_view_mut::<3, 3>(0, 0)
        .copy_from(&Matrix3::identity());
    sb.fixed_view_mut::<3, 3>(3, 3).copy_from(&r.transpose());
    let hb = sb.transpose() * ic[0] * sb;
    h.fixed_view_mut::<6, 6>(0, 0).copy_from(&hb);
    h
}

fn foot_point(kin: &Kinematics, model: &RobotModel, foot: usize) -> (Vector3<f64>, Matrix3<f64>) {
    let spec = &model.feet[foot];
    let xw = &kin.x_world[spec.link];
    let rot = xw.rot.transpose();
    (xw.trans + rot * spec.offset, rot)
}

fn contact_terms(
    model: &RobotModel,
    state: &GeneralizedState,
    kin: &Kinematics,
    foot: usize,
) -> (Vector3<f64>, Vector3<f64>, ContactJacobian, Vector3<f64>) {
    let spec = &model.feet[foot];
    let (pos, rot) = foot_point(kin, model, foot);
    let r_base = state.rotation();

    let mut jac = ContactJacobian::zeros();
    jac.fixed_view_mut::<3, 3>(0, 0)
        .copy_from(&(-skew(&(pos - state.base_position)) * r_base));
    jac.fixed_view_mut::<3, 3>(0, 3)
        .copy_from(&Matrix3::identity());
    let mut j = spec.link;
    while j != 0 {
        let xw = &kin.x_world[j];
        let axis_world = xw.rot.transpose() * angular(&kin.subspace[j]);
        let col = axis_world.cross(&(pos - xw.trans));
        jac.fixed_view_mut::<3, 1>(0, RobotModel::dof_of_link(j))
            .copy_from(&col);
        j = model.links[j].parent.unwrap();
    }

    let v = kin.vel[spec.link];
    let a = kin.bias_acc[spec.link];
    let w = angular(&v);
    let v_point = linear(&v) + w.cross(&spec.offset);
    let a_point = linear(&a) + angular(&a).cross(&spec.offset) + w.cross(&v_point);
    (pos, rot * v_point, jac, rot * a_point)
}

/// Mass matrix, bias forces, contact Jacobians and drifts at `state`.
pub fn compute_dynamics(model: &RobotModel, state: &GeneralizedState) -> DynamicsQuantities {
    let kin = kinematics(model, state);
    let inertias = link_inertias(model);
    let zero = GenVector::zeros();
    let mass_matrix = crba(model, state, &kin, &inertias);
    let coriolis = rnea(model, state, &kin, &inertias, &zero, true, false);
    let gravity = rnea(model, state, &kin, &inertias, &zero, false, true);
    let mut contact_jacobians = [ContactJacobian::zeros(); NUM_LEGS];
    let mut contact_drifts = [Vector3::zeros(); NUM_LEGS];
    let mut foot_positions = [Vector3::zeros(); NUM_LEGS];
    let mut foot_velocities = [Vector3::zeros(); NUM_LEGS];
    for foot in 0..NUM_LEGS {
        let (p, v, j, d) = contact_terms(model, state, &kin, foot);
        foot_positions[foot] = p;
        foot_velocities[foot] = v;
        contact_jacobians[foot] = j;
        contact_drifts[foot] = d;
    }
    DynamicsQuantities {
        mass_matrix,
        coriolis,
        gravity,
        contact_jacobians,
        contact_drifts,
        foot_positions,
        foot_velocities,
    }
}

/// World-frame position and velocity of a foot contact point.
pub fn foot_kinematics(
    model: &RobotModel,
    state: &GeneralizedState,
    foot: usize,
) -> Result<(Vector3<f64>, Vector3<f64>), DynamicsError> {
    if foot >= NUM_LEGS {
        return Err(DynamicsError::FootIndex(foot));
    }
    let kin = kinematics(model, state);
    let (p, v, _, _) = contact_terms(model, state, &kin, foot);
    Ok((p, v))
}

/// World-frame positions of all four feet.
pub fn foot_positions(model: &RobotModel, state: &GeneralizedState) -> [Vector3<f64>; NUM_LEGS] {
    let kin = kinematics(model, state);
    std::array::from_fn(|foot| foot_point(&kin, model, foot).0)
}

/// World-frame pose (rotation, origin) of every link.
pub fn link_poses(model: &RobotModel, state: &GeneralizedState) -> Vec<(Matrix3<f64>, Vector3<f64>)> {
    kinematics(model, state)
        .x_world
        .iter()
        .map(|x| (x.rot.transpose(), x.trans))
        .collect()
}

/// Generalized force `Σ Jc_iᵀ f_i` of world-frame foot forces.
pub fn contact_generalized_force(
    dynamics: &DynamicsQuantities,
    forces: &[Vector3<f64>; NUM_LEGS],
) -> GenVector {
    let mut out = GenVector::zeros();
    for (j, f) in dynamics.contact_jacobians.iter().zip(forces) {
        out += j.transpose() * f;
    }
    out
}

/// Generalized force with joint torques on the actuated rows.
pub fn actuation(tau: &JointVector) -> GenVector {
    let mut out = GenVector::zeros();
    out.fixed_rows_mut::<NUM_JOINTS>(BASE_DOF).copy_from(tau);
    out
}

/// Solve `A qdd = Sjᵀ tau + Σ Jcᵀ f + extra - b - g` using precomputed quantities.
pub fn forward_dynamics_with(
    dynamics: &DynamicsQuantities,
    tau: &JointVector,
    external_foot_forces: &[Vector3<f64>; NUM_LEGS],
    extra: &GenVector,
) -> Result<GenVector, DynamicsError> {
    let rhs = actuation(tau) + contact_generalized_force(dynamics, external_foot_forces) + extra
        - dynamics.coriolis
        - dynamics.gravity;
    let chol = dynamics
        .mass_matrix
        .cholesky()
        .ok_or(DynamicsError::SingularMassMatrix)?;
    Ok(chol.solve(&rhs))
}

/// Generalized acceleration under joint torques and world-frame foot forces.
pub fn forward_dynamics(
    model: &RobotModel,
    state: &GeneralizedState,
    tau: &JointVector,
    external_foot_forces: &[Vector3<f64>; NUM_LEGS],
) -> Result<GenVector, DynamicsError> {
    let dyn_q = compute_dynamics(model, state);
    forward_dynamics_with(&dyn_q, tau, external_foot_forces, &GenVector::zeros())
}

/// Generalized force of a world-frame wrench applied at the base origin.
pub fn base_wrench_generalized(
    state: &GeneralizedState,
    force_world: &Vector3<f64>,
    torque_world: &Vector3<f64>,
) -> GenVector {
    let mut out = GenVector::zeros();
    let r = state.rotation();
    out.fixed_rows_mut::<3>(0)
        .copy_from(&(r.transpose() * torque_world));
    out.fixed_rows_mut::<3>(3).copy_from(force_world);
    out
}

pub fn kinetic_energy(dynamics: &DynamicsQuantities, state: &GeneralizedState) -> f64 {
    let v = state.velocity();
    0.5 * v.dot(&(dynamics.mass_matrix * v))
}

/// Gravitational potential energy relative to the plane `z = 0`.
pub fn potential_energy(model: &RobotModel, state: &GeneralizedState) -> f64 {
    let kin = kinematics(model, state);
    model
        .links
        .iter()
        .zip(&kin.x_world)
        .map(|(l, x)| {
            let c = x.trans + x.rot.transpose() * l.com;
            -l.mass * model.gravity.dot(&c)
        })
        .sum()
}

pub fn total_energy(model: &RobotModel, state: &GeneralizedState) -> f64 {
    let d = compute_dynamics(model, state);
    kinetic_energy(&d, state) + potential_energy(model, state)
}

/// Whole-robot center of mass in world coordinates.
pub fn center_of_mass(model: &RobotModel, state: &GeneralizedState) -> Vector3<f64> {
    let kin = kinematics(model, state);
    model
        .links
        .iter()
        .zip(&kin.x_world)
        .map(|(l, x)| l.mass * (x.trans + x.rot.transpose() * l.com))
        .sum::<Vector3<f64>>()
        / model.body_mass
}
