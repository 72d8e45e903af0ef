//! Oracles and fixtures shared by the integration tests.

#![allow(dead_code)]

use legged_core::command::LocomotionCommand;
use legged_core::dynamics::{foot_positions, DynamicsQuantities};
use legged_core::model::{neutral_state, GeneralizedState, RobotModel};
use legged_core::mpc::{build_reference, linearize_step, BodyState, Linearization, MpcConfig, ReferenceTrajectory};
use legged_core::qp::{solve, QpProblem};
use legged_core::wbic::{pinv, Task};
use nalgebra::{DMatrix, DVector, Matrix3, UnitQuaternion, Vector3};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub const G: f64 = 9.81;

/// Solve the equality-constrained QP for every subset of inequalities
/// treated as equalities; the primal-feasible candidate with the lowest
/// objective is the optimum.
pub fn enumerate_optimum(p: &QpProblem) -> Option<DVector<f64>> {
    let n = p.dim();
    let me = p.eq_vector.len();
    let mi = p.ineq_vector.len();
    let mut best: Option<(f64, DVector<f64>)> = None;
    for mask in 0u32..(1 << mi) {
        let subset: Vec<usize> = (0..mi).filter(|i| mask & (1 << i) != 0).collect();
        let m = me + subset.len();
        if m > n {
            continue;
        }
        let mut kkt = DMatrix::zeros(n + m, n + m);
        let mut rhs = DVector::zeros(n + m);
        kkt.view_mut((0, 0), (n, n)).copy_from(&p.hessian);
        rhs.rows_mut(0, n).copy_from(&(-&p.linear));
        for r in 0..m {
            let (row, c) = if r < me {
                (p.eq_matrix.row(r).into_owned(), p.eq_vector[r])
            } else {
                let i = subset[r - me];
                (p.ineq_matrix.row(i).into_owned(), p.ineq_vector[i])
            };
            kkt.view_mut((n + r, 0), (1, n)).copy_from(&row);
            kkt.view_mut((0, n + r), (n, 1)).copy_from(&row.transpose());
            rhs[n + r] = -c;
        }
        let lu = kkt.lu();
        if lu.determinant().abs() < 1e-12 {
            continue;
        }
        let Some(sol) = lu.solve(&rhs) else { continue };
        let x = sol.rows(0, n).into_owned();
        let slack = &p.ineq_matrix * &x + &p.ineq_vector;
        if slack.iter().any(|s| *s < -1e-9) {
            continue;
        }
        let f = p.objective(&x);
        if best.as_ref().is_none_or(|(bf, _)| f < *bf) {
            best = Some((f, x));
        }
    }
    best.map(|(_, x)| x)
}

pub fn random_problem(rng: &mut ChaCha8Rng) -> QpProblem {
    let n = rng.random_range(1..=4);
    let me = rng.random_range(0..n.min(2) + 1).min(n - 1);
    let mi = rng.random_range(0..=6);
    let m = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
    let g = m.transpose() * &m + DMatrix::identity(n, n) * 0.1;
    let a = DVector::from_fn(n, |_, _| rng.random_range(-3.0..3.0));
    // a known interior point keeps the problem feasible
    let x0 = DVector::from_fn(n, |_, _| rng.random_range(-1.0..1.0));
    let ce = DMatrix::from_fn(me, n, |_, _| rng.random_range(-1.0..1.0));
    let ce0 = -(&ce * &x0);
    let ci = DMatrix::from_fn(mi, n, |_, _| rng.random_range(-1.0..1.0));
    let ci0 = -(&ci * &x0) + DVector::from_fn(mi, |_, _| rng.random_range(0.0..0.5));
    QpProblem::new(g, a)
        .with_equalities(ce, ce0)
        .with_inequalities(ci, ci0)
}

pub fn inertia() -> Matrix3<f64> {
    Matrix3::from_diagonal(&Vector3::new(0.07, 0.26, 0.24))
}

pub fn symmetric_arms(h: f64) -> [Vector3<f64>; 4] {
    [
        Vector3::new(0.19, -0.11, -h),
        Vector3::new(0.19, 0.11, -h),
        Vector3::new(-0.19, -0.11, -h),
        Vector3::new(-0.19, 0.11, -h),
    ]
}

pub fn hover_reference(h: f64, horizon: usize, dt: f64) -> ReferenceTrajectory {
    let model = RobotModel::bundled();
    let mut s = neutral_state(&model);
    s.base_position.z = h;
    let mut r = build_reference(&s, &LocomotionCommand::stand(h), horizon, dt);
    for arms in r.moment_arms.iter_mut() {
        *arms = symmetric_arms(h);
    }
    r
}

pub fn hover_problem(mass: f64, horizon: usize) -> (ReferenceTrajectory, Vec<Linearization>, BodyState) {
    let dt = 0.05;
    let h = 0.29;
    let r = hover_reference(h, horizon, dt);
    let g = Vector3::new(0.0, 0.0, -G);
    let lins = (0..horizon)
        .map(|k| linearize_step(mass, &inertia(), &g, r.yaw[k], &[true; 4], &r.moment_arms[k], dt))
        .collect();
    (r.clone(), lins, r.states[0])
}

/// Same problem with states kept as variables and the dynamics imposed as
/// equality constraints.
pub fn non_condensed(r: &ReferenceTrajectory, lins: &[Linearization], cfg: &MpcConfig, x0: &BodyState) -> Vec<DVector<f64>> {
    let m = lins.len();
    let nu: Vec<usize> = lins.iter().map(|l| l.b.ncols()).collect();
    let nu_total: usize = nu.iter().sum();
    let n = 12 * m + nu_total;
    let mut h = DMatrix::zeros(n, n);
    let mut a = DVector::zeros(n);
    for k in 0..m {
        for i in 0..12 {
            h[(12 * k + i, 12 * k + i)] = 2.0 * cfg.q[i];
            a[12 * k + i] = -2.0 * cfg.q[i] * r.states[k + 1][i];
        }
    }
    let rr = cfg.r.diagonal();
    for j in 0..nu_total {
        h[(12 * m + j, 12 * m + j)] = 2.0 * rr[j % 3];
    }
    // x_{k+1} - A x_k - B u_k - g = 0
    let mut ce = DMatrix::zeros(12 * m, n);
    let mut ce0 = DVector::zeros(12 * m);
    let mut off = 12 * m;
    for (k, l) in lins.iter().enumerate() {
        ce.view_mut((12 * k, 12 * k), (12, 12)).fill_with_identity();
        if k == 0 {
            let ax0 = l.a * x0;
            for i in 0..12 {
                ce0[i] = -ax0[i] - l.g_hat[i];
            }
        } else {
            ce.view_mut((12 * k, 12 * (k - 1)), (12, 12)).copy_from(&(-l.a));
            for i in 0..12 {
                ce0[12 * k + i] = -l.g_hat[i];
            }
        }
        ce.view_mut((12 * k, off), (12, nu[k])).copy_from(&(-&l.b));
        off += nu[k];
    }
    let nf = nu_total / 3;
    let mut ci = DMatrix::zeros(6 * nf, n);
    let mut ci0 = DVector::zeros(6 * nf);
    for j in 0..nf {
        let c = 12 * m + 3 * j;
        let row = 6 * j;
        ci[(row, c + 2)] = 1.0;
        ci0[row] = -cfg.fmin;
        ci[(row + 1, c + 2)] = -1.0;
        ci0[row + 1] = cfg.fmax;
        for (d, axis) in [(2, 0), (4, 1)] {
            ci[(row + d, c + axis)] = -1.0;
            ci[(row + d, c + 2)] = cfg.mu;
            ci[(row + d + 1, c + axis)] = 1.0;
            ci[(row + d + 1, c + 2)] = cfg.mu;
        }
    }
    let sol = solve(&QpProblem::new(h, a).with_equalities(ce, ce0).with_inequalities(ci, ci0)).unwrap();
    let mut out = Vec::new();
    let mut off = 12 * m;
    for k in 0..m {
        out.push(sol.x.rows(off, nu[k]).into_owned());
        off += nu[k];
    }
    out
}

pub fn standing_state(model: &RobotModel) -> GeneralizedState {
    let mut s = neutral_state(model);
    s.base_position.z = -foot_positions(model, &s)[0].z;
    s
}

pub fn random_state(model: &RobotModel, rng: &mut ChaCha8Rng, moving: bool) -> GeneralizedState {
    let mut s = standing_state(model);
    s.base_orientation = UnitQuaternion::from_euler_angles(
        rng.random_range(-0.2..0.2),
        rng.random_range(-0.2..0.2),
        rng.random_range(-3.0..3.0),
    );
    for j in 0..12 {
        s.joint_positions[j] += rng.random_range(-0.3..0.3);
        if moving {
            s.joint_velocities[j] = rng.random_range(-3.0..3.0);
        }
    }
    if moving {
        s.base_angular_velocity = Vector3::from_fn(|_, _| rng.random_range(-1.0..1.0));
        s.base_linear_velocity = Vector3::from_fn(|_, _| rng.random_range(-1.0..1.0));
    }
    s
}

pub fn rand3(rng: &mut ChaCha8Rng, scale: f64) -> Vector3<f64> {
    Vector3::from_fn(|_, _| rng.random_range(-scale..scale))
}

pub fn random_tasks(s: &GeneralizedState, d: &DynamicsQuantities, swing: &[usize], rng: &mut ChaCha8Rng) -> Vec<Task> {
    let gains = [100.0, 10.0];
    let q_des = s.base_orientation * UnitQuaternion::from_scaled_axis(rand3(rng, 0.1));
    let mut tasks = vec![
        Task::body_orientation(s, &q_des, &rand3(rng, 0.5), &rand3(rng, 1.0), gains),
        Task::body_position(s, &(s.base_position + rand3(rng, 0.05)), &rand3(rng, 0.5), &rand3(rng, 1.0), gains),
    ];
    for &foot in swing {
        let p = d.foot_positions[foot] + rand3(rng, 0.03);
        tasks.push(Task::foot_position(d, foot, &p, &rand3(rng, 0.5), &rand3(rng, 2.0), gains));
    }
    tasks
}

pub fn contacts_from_mask(mask: u8) -> [bool; 4] {
    std::array::from_fn(|i| mask & (1 << i) != 0)
}

/// Minimum-norm forces balancing the floating-base rows at rest.
pub fn balancing_forces(jc: &DMatrix<f64>, d: &DynamicsQuantities) -> DVector<f64> {
    let rhs = DVector::from_fn(6, |i, _| d.coriolis[i] + d.gravity[i]);
    let jt_base = jc.columns(0, 6).transpose();
    pinv(&jt_base) * rhs
}
