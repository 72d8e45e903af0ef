//! Minimal 6D spatial vector algebra (motion = [ω; v], force = [n; f]).

use nalgebra::{Matrix3, Matrix6, Vector3, Vector6};

pub fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

#[inline]
pub fn angular(m: &Vector6<f64>) -> Vector3<f64> {
    m.fixed_rows::<3>(0).into_owned()
}

#[inline]
pub fn linear(m: &Vector6<f64>) -> Vector3<f64> {
    m.fixed_rows::<3>(3).into_owned()
}

#[inline]
pub fn stack(top: &Vector3<f64>, bottom: &Vector3<f64>) -> Vector6<f64> {
    Vector6::new(top.x, top.y, top.z, bottom.x, bottom.y, bottom.z)
}

/// Motion cross product `v ×m`.
pub fn cross_motion(v: &Vector6<f64>, m: &Vector6<f64>) -> Vector6<f64> {
    let (w, vl) = (angular(v), linear(v));
    let (mw, ml) = (angular(m), linear(m));
    stack(&w.cross(&mw), &(w.cross(&ml) + vl.cross(&mw)))
}

/// Force cross product `v ×* f`.
pub fn cross_force(v: &Vector6<f64>, f: &Vector6<f64>) -> Vector6<f64> {
    let (w, vl) = (angular(v), linear(v));
    let (n, fl) = (angular(f), linear(f));
    stack(&(w.cross(&n) + vl.cross(&fl)), &w.cross(&fl))
}

/// Plücker transform from frame A to frame B. `rot` maps A coordinates to
/// B coordinates; `trans` is the origin of B expressed in A.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Transform {
    pub rot: Matrix3<f64>,
    pub trans: Vector3<f64>,
}

impl Transform {
    pub fn identity() -> Self {
        Self {
            rot: Matrix3::identity(),
            trans: Vector3::zeros(),
        }
    }

    pub fn new(rot: Matrix3<f64>, trans: Vector3<f64>) -> Self {
        Self { rot, trans }
    }

    pub fn apply_motion(&self, m: &Vector6<f64>) -> Vector6<f64> {
        let w = angular(m);
        let v = linear(m);
        stack(&(self.rot * w), &(self.rot * (v - self.trans.cross(&w))))
    }

    /// `Xᵀ f`: carries a force expressed in B back to A.
    pub fn transpose_apply_force(&self, f: &Vector6<f64>) -> Vector6<f64> {
        let n = self.rot.transpose() * angular(f);
        let fl = self.rot.transpose() * linear(f);
        stack(&(n + self.trans.cross(&fl)), &fl)
    }

    /// `self ∘ other` where `other: W → A` and `self: A → B`.
    pub fn compose(&self, other: &Transform) -> Transform {
        Transform {
            rot: self.rot * other.rot,
            trans: other.trans + other.rot.transpose() * self.trans,
        }
    }

    pub fn to_matrix(&self) -> Matrix6<f64> {
        let mut x = Matrix6::zeros();
        x.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rot);
        x.fixed_view_mut::<3, 3>(3, 3).copy_from(&self.rot);
        x.fixed_view_mut::<3, 3>(3, 0)
            .copy_from(&(-self.rot * skew(&self.trans)));
        x
    }
}

/// Spatial inertia about the link origin for a body with CoM `com` and
/// rotational inertia `inertia_com` about the CoM.
pub fn spatial_inertia(mass: f64, com: &Vector3<f64>, inertia_com: &Matrix3<f64>) -> Matrix6<f64> {
    let c = skew(com);
    let mut i = Matrix6::zeros();
    i.fixed_view_mut::<3, 3>(0, 0)
        .copy_from(&(inertia_com + mass * c * c.transpose()));
    i.fixed_view_mut::<3, 3>(0, 3).copy_from(&(mass * c));
    i.fixed_view_mut::<3, 3>(3, 0).copy_from(&(mass * c.transpose()));
    i.fixed_view_mut::<3, 3>(3, 3)
        .copy_from(&(mass * Matrix3::identity()));
    i
}
