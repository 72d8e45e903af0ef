//! Robot description and configuration-space conventions.
//!
//! A [`RobotModel`] is a kinematic tree with a floating base (link 0) and
//! twelve revolute joints, three per leg, ordered abduction, hip, knee for
//! the legs FR, FL, HR, HL. Position-level configuration is 19-dimensional
//! (unit quaternion, base position, joint angles); velocity-level is
//! 18-dimensional:
//!
//! ```text
//!     qdot = [ omega (body frame) | base linear velocity (world) | joint rates ]
//! ```

use nalgebra::{
    Isometry3, Matrix3, SMatrix, SVector, Translation3, UnitQuaternion, Vector3,
};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const NUM_LEGS: usize = 4;
pub const NUM_JOINTS: usize = 12;
/// Velocity-level dimension of the generalized coordinates.
pub const NUM_DOF: usize = 18;
/// Floating-base velocity dimension.
pub const BASE_DOF: usize = 6;

pub type JointVector = SVector<f64, NUM_JOINTS>;
pub type GenVector = SVector<f64, NUM_DOF>;
pub type GenMatrix = SMatrix<f64, NUM_DOF, NUM_DOF>;

/// Foot indices in the canonical (FR, FL, HR, HL) order.
pub const FR: usize = 0;
pub const FL: usize = 1;
pub const HR: usize = 2;
pub const HL: usize = 3;
pub const FOOT_NAMES: [&str; NUM_LEGS] = ["FR", "FL", "HR", "HL"];

/// Bundled nominal parameter file.
pub const MINI_CHEETAH_JSON: &str = include_str!("../data/mini_cheetah.json");

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("model parse error: {0}")]
    Parse(String),
    #[error("invalid model field `{field}`: {message}")]
    Invalid { field: String, message: String },
}

fn invalid(field: impl Into<String>, message: impl Into<String>) -> ModelError {
    ModelError::Invalid {
        field: field.into(),
        message: message.into(),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinkSpec {
    pub name: String,
    /// `None` for the floating base.
    pub parent: Option<usize>,
    /// Unit axis in the joint frame (ignored for the base).
    pub joint_axis: Vector3<f64>,
    /// Pose of the joint frame in the parent link frame.
    pub joint_origin: Isometry3<f64>,
    pub mass: f64,
    pub com: Vector3<f64>,
    /// Rotational inertia about the CoM, expressed in the link frame.
    pub inertia: Matrix3<f64>,
    /// Reflected rotor inertia at the joint output.
    pub rotor_inertia: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FootSpec {
    pub link: usize,
    /// Contact point in the foot link frame.
    pub offset: Vector3<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RobotModel {
    pub name: String,
    pub links: Vec<LinkSpec>,
    pub feet: [FootSpec; NUM_LEGS],
    /// Hip locations in the body frame, used by the footstep planner.
    pub shoulder_offsets: [Vector3<f64>; NUM_LEGS],
    /// Lumped mass (sum over links).
    pub body_mass: f64,
    /// Lumped rotational inertia about the CoM in the body frame.
    pub body_inertia: Matrix3<f64>,
    pub gravity: Vector3<f64>,
    pub torque_limit: f64,
    pub velocity_limit: f64,
    pub stand_posture: JointVector,
    pub nominal_mass: Option<f64>,
}

impl RobotModel {
    pub fn bundled() -> Self {
        load_model(MINI_CHEETAH_JSON).expect("bundled model is valid")
    }

    pub fn num_links(&self) -> usize {
        self.links.len()
    }

    /// Velocity index of the joint driving `link` (link 0 is the base).
    pub fn dof_of_link(link: usize) -> usize {
        BASE_DOF + link - 1
    }

    /// Joint index (0..12) of `(leg, k)` with k = 0 abduction, 1 hip, 2 knee.
    pub fn joint_index(leg: usize, k: usize) -> usize {
        3 * leg + k
    }

    pub fn is_abduction(joint: usize) -> bool {
        joint % 3 == 0
    }

    pub fn gravity_magnitude(&self) -> f64 {
        self.gravity.norm()
    }
}

/// Floating-base state. See the module docs for the velocity convention.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneralizedState {
    pub base_orientation: UnitQuaternion<f64>,
    pub base_position: Vector3<f64>,
    pub joint_positions: JointVector,
    /// Body-frame angular velocity.
    pub base_angular_velocity: Vector3<f64>,
    /// World-frame linear velocity of the base origin.
    pub base_linear_velocity: Vector3<f64>,
    pub joint_velocities: JointVector,
}

impl GeneralizedState {
    /// Stacked 18-dimensional velocity.
    pub fn velocity(&self) -> GenVector {
        let mut v = GenVector::zeros();
        v.fixed_rows_mut::<3>(0).copy_from(&self.base_angular_velocity);
        v.fixed_rows_mut::<3>(3).copy_from(&self.base_linear_velocity);
        v.fixed_rows_mut::<NUM_JOINTS>(6).copy_from(&self.joint_velocities);
        v
    }

    pub fn set_velocity(&mut self, v: &GenVector) {
        self.base_angular_velocity = v.fixed_rows::<3>(0).into_owned();
        self.base_linear_velocity = v.fixed_rows::<3>(3).into_owned();
        self.joint_velocities = v.fixed_rows::<NUM_JOINTS>(6).into_owned();
    }

    /// Retract along a velocity-space displacement: `q ⊕ dq`.
    pub fn integrate_configuration(&mut self, dq: &GenVector) {
        let dtheta: Vector3<f64> = dq.fixed_rows::<3>(0).into_owned();
        self.base_orientation *= UnitQuaternion::from_scaled_axis(dtheta);
        self.base_orientation.renormalize();
        self.base_position += dq.fixed_rows::<3>(3);
        self.joint_positions += dq.fixed_rows::<NUM_JOINTS>(6);
    }

    pub fn rotation(&self) -> Matrix3<f64> {
        self.base_orientation.to_rotation_matrix().into_inner()
    }

    /// Z-Y-X Euler angles as (roll, pitch, yaw).
    pub fn euler_rpy(&self) -> Vector3<f64> {
        let (r, p, y) = self.base_orientation.euler_angles();
        Vector3::new(r, p, y)
    }

    pub fn is_finite(&self) -> bool {
        self.base_orientation.coords.iter().all(|x| x.is_finite())
            && self.base_position.iter().all(|x| x.is_finite())
            && self.joint_positions.iter().all(|x| x.is_finite())
            && self.velocity().iter().all(|x| x.is_finite())
    }
}

/// Identity orientation, base at the origin, stand posture, zero velocity.
pub fn neutral_state(model: &RobotModel) -> GeneralizedState {
    GeneralizedState {
        base_orientation: UnitQuaternion::identity(),
        base_position: Vector3::zeros(),
        joint_positions: model.stand_posture,
        base_angular_velocity: Vector3::zeros(),
        base_linear_velocity: Vector3::zeros(),
        joint_velocities: JointVector::zeros(),
    }
}

// ---------------------------------------------------------------------------
// JSON schema

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawOrigin {
    xyz: [f64; 3],
    #[serde(default)]
    rpy: [f64; 3],
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawLink {
    name: String,
    parent: Option<usize>,
    #[serde(default)]
    joint_axis: Option<[f64; 3]>,
    #[serde(default)]
    joint_origin: Option<RawOrigin>,
    mass: f64,
    com: [f64; 3],
    inertia: [[f64; 3]; 3],
    #[serde(default)]
    rotor_inertia: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawFoot {
    link: usize,
    offset: [f64; 3],
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawLimits {
    torque: f64,
    velocity: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawModel {
    #[serde(default)]
    name: Option<String>,
    #[serde(default)]
    nominal_mass: Option<f64>,
    links: Vec<RawLink>,
    feet: Vec<RawFoot>,
    shoulders: Vec<[f64; 3]>,
    limits: RawLimits,
    gravity: [f64; 3],
    stand_posture: Vec<f64>,
    #[serde(default)]
    body_inertia: Option<[[f64; 3]; 3]>,
}

fn all_finite(xs: &[f64]) -> bool {
    xs.iter().all(|x| x.is_finite())
}

fn check_inertia(field: &str, m: &Matrix3<f64>, strict: bool) -> Result<(), ModelError> {
    if !all_finite(m.as_slice()) {
        return Err(invalid(field, "non-finite entry"));
    }
    if (m - m.transpose()).abs().max() > 1e-12 * (1.0 + m.abs().max()) {
        return Err(invalid(field, "inertia is not symmetric"));
    }
    let eig = m.symmetric_eigenvalues();
    let min = eig.min();
    if strict && min <= 0.0 {
        return Err(invalid(field, "inertia is not positive definite"));
    }
    if !strict && min < -1e-12 {
        return Err(invalid(field, "inertia is not positive semidefinite"));
    }
    Ok(())
}

/// Parse and validate a JSON model description.
pub fn load_model(config_text: &str) -> Result<RobotModel, ModelError> {
    let raw: RawModel =
        serde_json::from_str(config_text).map_err(|e| ModelError::Parse(e.to_string()))?;

    let mut links = Vec::with_capacity(raw.links.len());
    for (i, l) in raw.links.iter().enumerate() {
        let field = |f: &str| format!("links[{i}].{f} ({})", l.name);
        if !l.mass.is_finite() || l.mass < 0.0 {
            return Err(invalid(field("mass"), format!("mass must be >= 0, got {}", l.mass)));
        }
        if !all_finite(&l.com) {
            return Err(invalid(field("com"), "non-finite entry"));
        }
        let inertia = Matrix3::from_row_slice(&l.inertia.concat());
        check_inertia(&field("inertia"), &inertia, false)?;
        if !l.rotor_inertia.is_finite() || l.rotor_inertia < 0.0 {
            return Err(invalid(field("rotor_inertia"), "rotor inertia must be >= 0"));
        }
        match l.parent {
            None if i != 0 => {
                return Err(invalid(field("parent"), "only link 0 may be the floating base"))
            }
            Some(_) if i == 0 => {
                return Err(invalid(field("parent"), "link 0 must be the floating base"))
            }
            Some(p) if p >= i => {
                return Err(invalid(field("parent"), "parents must precede children"))
            }
            _ => {}
        }
        let (axis, origin) = if i == 0 {
            (Vector3::zeros(), Isometry3::identity())
        } else {
            let axis = l
                .joint_axis
                .ok_or_else(|| invalid(field("joint_axis"), "missing joint axis"))?;
            let axis = Vector3::from(axis);
            if !all_finite(axis.as_slice()) || (axis.norm() - 1.0).abs() > 1e-9 {
                return Err(invalid(field("joint_axis"), "joint axis must be unit-norm"));
            }
            let o = l
                .joint_origin
                .as_ref()
                .ok_or_else(|| invalid(field("joint_origin"), "missing joint origin"))?;
            if !all_finite(&o.xyz) || !all_finite(&o.rpy) {
                return Err(invalid(field("joint_origin"), "non-finite entry"));
            }
            let origin = Isometry3::from_parts(
                Translation3::from(Vector3::from(o.xyz)),
                UnitQuaternion::from_euler_angles(o.rpy[0], o.rpy[1], o.rpy[2]),
            );
            (axis, origin)
        };
        links.push(LinkSpec {
            name: l.name.clone(),
            parent: l.parent,
            joint_axis: axis,
            joint_origin: origin,
            mass: l.mass,
            com: Vector3::from(l.com),
            inertia,
            rotor_inertia: l.rotor_inertia,
        });
    }

    if links.len() != 1 + NUM_JOINTS {
        return Err(invalid(
            "links",
            format!("expected 13 links (base + 12 joints), got {}", links.len()),
        ));
    }
    if raw.feet.len() != NUM_LEGS {
        return Err(invalid(
            "feet",
            format!("expected 4 foot links, got {}", raw.feet.len()),
        ));
    }
    let mut feet = [FootSpec {
        link: 0,
        offset: Vector3::zeros(),
    }; NUM_LEGS];
    for (k, f) in raw.feet.iter().enumerate() {
        if f.link == 0 || f.link >= links.len() {
            return Err(invalid(format!("feet[{k}].link"), "foot link out of range"));
        }
        if links.iter().any(|l| l.parent == Some(f.link)) {
            return Err(invalid(format!("feet[{k}].link"), "foot link must be a leaf"));
        }
        if !all_finite(&f.offset) {
            return Err(invalid(format!("feet[{k}].offset"), "non-finite entry"));
        }
        feet[k] = FootSpec {
            link: f.link,
            offset: Vector3::from(f.offset),
        };
    }
    // each leg is a chain of three joints hanging from the base
    for (k, f) in feet.iter().enumerate() {
        let mut depth = 0;
        let mut l = f.link;
        while let Some(p) = links[l].parent {
            depth += 1;
            l = p;
        }
        if depth != 3 {
            return Err(invalid(
                format!("feet[{k}].link"),
                format!("foot must sit three joints below the base, found {depth}"),
            ));
        }
    }

    if raw.shoulders.len() != NUM_LEGS {
        return Err(invalid(
            "shoulders",
            format!("expected 4 shoulder offsets, got {}", raw.shoulders.len()),
        ));
    }
    let mut shoulder_offsets = [Vector3::zeros(); NUM_LEGS];
    for (k, s) in raw.shoulders.iter().enumerate() {
        if !all_finite(s) {
            return Err(invalid(format!("shoulders[{k}]"), "non-finite entry"));
        }
        shoulder_offsets[k] = Vector3::from(*s);
    }

    if !(raw.limits.torque.is_finite() && raw.limits.torque > 0.0) {
        return Err(invalid("limits.torque", "torque limit must be > 0"));
    }
    if !(raw.limits.velocity.is_finite() && raw.limits.velocity > 0.0) {
        return Err(invalid("limits.velocity", "velocity limit must be > 0"));
    }
    if !all_finite(&raw.gravity) {
        return Err(invalid("gravity", "non-finite entry"));
    }
    if raw.stand_posture.len() != NUM_JOINTS || !all_finite(&raw.stand_posture) {
        return Err(invalid("stand_posture", "expected 12 finite joint angles"));
    }

    let body_mass: f64 = links.iter().map(|l| l.mass).sum();
    if body_mass <= 0.0 {
        return Err(invalid("links", "total mass must be > 0"));
    }
    let stand_posture = JointVector::from_column_slice(&raw.stand_posture);
    let body_inertia = match raw.body_inertia {
        Some(m) => Matrix3::from_row_slice(&m.concat()),
        None => lumped_inertia(&links, &stand_posture),
    };
    check_inertia("body_inertia", &body_inertia, true)?;

    Ok(RobotModel {
        name: raw.name.unwrap_or_else(|| "robot".to_string()),
        links,
        feet,
        shoulder_offsets,
        body_mass,
        body_inertia,
        gravity: Vector3::from(raw.gravity),
        torque_limit: raw.limits.torque,
        velocity_limit: raw.limits.velocity,
        stand_posture,
        nominal_mass: raw.nominal_mass,
    })
}

/// Composite rotational inertia of the whole tree about its CoM at the
/// given posture, in the body frame.
fn lumped_inertia(links: &[LinkSpec], posture: &JointVector) -> Matrix3<f64> {
    let mut poses: Vec<Isometry3<f64>> = Vec::with_capacity(links.len());
    for (i, l) in links.iter().enumerate() {
        let pose = match l.parent {
            None => Isometry3::identity(),
            Some(p) => {
                let q = posture[i - 1];
                let joint = UnitQuaternion::from_scaled_axis(l.joint_axis * q);
                poses[p] * l.joint_origin * Isometry3::from_parts(Translation3::identity(), joint)
            }
        };
        poses.push(pose);
    }
    let total: f64 = links.iter().map(|l| l.mass).sum();
    let com = links
        .iter()
        .zip(&poses)
        .map(|(l, x)| l.mass * x.transform_point(&l.com.into()).coords)
        .sum::<Vector3<f64>>()
        / total;
    let mut inertia = Matrix3::zeros();
    for (l, x) in links.iter().zip(&poses) {
        let r = x.rotation.to_rotation_matrix().into_inner();
        let c = x.transform_point(&l.com.into()).coords - com;
        inertia += r * l.inertia * r.transpose()
            + l.mass * (c.norm_squared() * Matrix3::identity() - c * c.transpose());
    }
    inertia
}
