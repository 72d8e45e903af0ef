//! Dual active-set solver against brute-force active-set enumeration.

use legged_core::qp::{kkt_residuals, solve, QpProblem};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

mod common;
use common::*;

#[test]
fn matches_enumeration_oracle_on_random_problems() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for case in 0..50 {
        let p = random_problem(&mut rng);
        let oracle = enumerate_optimum(&p).expect("oracle finds the optimum");
        let sol = solve(&p).unwrap_or_else(|e| panic!("case {case}: {e}"));
        let err = (&sol.x - &oracle).amax();
        assert!(err < 1e-7, "case {case}: |x - oracle| = {err}");
        let (stat, eq, viol, comp) = kkt_residuals(&p, &sol);
        assert!(stat < 1e-8, "case {case}: stationarity {stat}");
        assert!(eq < 1e-8, "case {case}: equality {eq}");
        assert!(viol < 1e-8, "case {case}: violation {viol}");
        assert!(comp < 1e-8, "case {case}: complementarity {comp}");
        assert!(sol.ineq_multipliers.iter().all(|l| *l >= -1e-12));
    }
}

#[test]
fn larger_random_problems_satisfy_kkt() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..20 {
        let n = 30;
        let me = 5;
        let mi = 60;
        let m = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
        let g = m.transpose() * &m + DMatrix::identity(n, n) * 1e-3;
        let a = DVector::from_fn(n, |_, _| rng.random_range(-5.0..5.0));
        let x0 = DVector::from_fn(n, |_, _| rng.random_range(-1.0..1.0));
        let ce = DMatrix::from_fn(me, n, |_, _| rng.random_range(-1.0..1.0));
        let ci = DMatrix::from_fn(mi, n, |_, _| rng.random_range(-1.0..1.0));
        let p = QpProblem::new(g, a)
            .with_equalities(ce.clone(), -(&ce * &x0))
            .with_inequalities(ci.clone(), -(&ci * &x0) + DVector::from_element(mi, 0.1));
        let sol = solve(&p).unwrap();
        let (stat, eq, viol, comp) = kkt_residuals(&p, &sol);
        assert!(stat < 1e-8 && eq < 1e-8 && viol < 1e-8 && comp < 1e-8, "{stat} {eq} {viol} {comp}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn argmin_invariant_under_cost_scaling(seed in any::<u64>(), scale in 0.01f64..100.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = random_problem(&mut rng);
        let mut scaled = p.clone();
        scaled.hessian *= scale;
        scaled.linear *= scale;
        let a = solve(&p).unwrap();
        let b = solve(&scaled).unwrap();
        prop_assert!((&a.x - &b.x).amax() < 1e-9);
    }

    #[test]
    fn dropping_inactive_constraint_keeps_solution(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = random_problem(&mut rng);
        let sol = solve(&p).unwrap();
        let slack = &p.ineq_matrix * &sol.x + &p.ineq_vector;
        if let Some(i) = (0..p.ineq_vector.len()).find(|&i| slack[i] > 1e-6) {
            let keep: Vec<usize> = (0..p.ineq_vector.len()).filter(|&k| k != i).collect();
            let reduced = p.clone().with_inequalities(
                p.ineq_matrix.select_rows(&keep),
                p.ineq_vector.select_rows(&keep),
            );
            let r = solve(&reduced).unwrap();
            prop_assert!((&r.x - &sol.x).amax() < 1e-9);
        }
    }
}
