//! Dense strictly convex quadratic programming.
//!
//! Solves
//!
//! ```text
//!     minimize     ½ xᵀ G x + aᵀ x
//!     subject to   C_E x + c_E  = 0
//!                  C_I x + c_I >= 0
//! ```
//!
//! with the dual active-set method of Goldfarb and Idnani. The solver keeps
//! `J = L⁻ᵀ Q` and the upper-triangular `R` of the factorization of the
//! active constraint normals and updates both with Givens rotations when a
//! constraint enters or leaves the active set.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq)]
pub struct QpProblem {
    pub hessian: DMatrix<f64>,
    pub linear: DVector<f64>,
    pub eq_matrix: DMatrix<f64>,
    pub eq_vector: DVector<f64>,
    pub ineq_matrix: DMatrix<f64>,
    pub ineq_vector: DVector<f64>,
}

impl QpProblem {
    /// Unconstrained problem of dimension `n` with the given cost.
    pub fn new(hessian: DMatrix<f64>, linear: DVector<f64>) -> Self {
        let n = linear.len();
        Self {
            hessian,
            linear,
            eq_matrix: DMatrix::zeros(0, n),
            eq_vector: DVector::zeros(0),
            ineq_matrix: DMatrix::zeros(0, n),
            ineq_vector: DVector::zeros(0),
        }
    }

    pub fn with_equalities(mut self, matrix: DMatrix<f64>, vector: DVector<f64>) -> Self {
        self.eq_matrix = matrix;
        self.eq_vector = vector;
        self
    }

    pub fn with_inequalities(mut self, matrix: DMatrix<f64>, vector: DVector<f64>) -> Self {
        self.ineq_matrix = matrix;
        self.ineq_vector = vector;
        self
    }

    pub fn dim(&self) -> usize {
        self.linear.len()
    }

    pub fn objective(&self, x: &DVector<f64>) -> f64 {
        0.5 * x.dot(&(&self.hessian * x)) + self.linear.dot(x)
    }

    fn check_dimensions(&self) -> Result<(), QpError> {
        let n = self.dim();
        let bad = |what: &str| Err(QpError::Dimension(what.to_string()));
        if self.hessian.nrows() != n || self.hessian.ncols() != n {
            return bad("hessian must be n×n");
        }
        if self.eq_matrix.ncols() != n || self.eq_matrix.nrows() != self.eq_vector.len() {
            return bad("equality matrix/vector mismatch");
        }
        if self.ineq_matrix.ncols() != n || self.ineq_matrix.nrows() != self.ineq_vector.len() {
            return bad("inequality matrix/vector mismatch");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QpSolution {
    pub x: DVector<f64>,
    /// Indices of inequality constraints active at the solution.
    pub active_set: Vec<usize>,
    pub objective: f64,
    /// Multipliers `λ_E` with `G x + a = C_Eᵀ λ_E + C_Iᵀ λ_I`.
    pub eq_multipliers: DVector<f64>,
    /// Nonnegative multipliers `λ_I`, zero for inactive constraints.
    pub ineq_multipliers: DVector<f64>,
    pub iterations: usize,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum QpError {
    #[error("inconsistent problem dimensions: {0}")]
    Dimension(String),
    #[error("cost hessian is not positive definite")]
    NotPositiveDefinite,
    #[error("equality constraints are linearly dependent or inconsistent")]
    DependentEqualities,
    /// `violated` is the inequality that could not be satisfied together with
    /// the inequalities active when the solver gave up.
    #[error("infeasible: constraint {violated} conflicts with active set {active:?}")]
    Infeasible { violated: usize, active: Vec<usize> },
    #[error("iteration limit {0} exceeded")]
    MaxIterations(usize),
}

/// Active constraint identifier.
#[derive(Debug, Clone, Copy, PartialEq)]
enum Active {
    Eq(usize),
    Ineq(usize),
}

struct Factor {
    n: usize,
    j: DMatrix<f64>,
    r: DMatrix<f64>,
    r_norm: f64,
}

impl Factor {
    /// `z = J₂ d₂` using the columns of `J` beyond the active count.
    fn step_direction(&self, d: &DVector<f64>, iq: usize) -> DVector<f64> {
        let mut z = DVector::zeros(self.n);
        for k in iq..self.n {
            z.axpy(d[k], &self.j.column(k), 1.0);
        }
        z
    }

    /// `r = R⁻¹ d₁` by back-substitution on the leading `iq` block.
    fn dual_direction(&self, d: &DVector<f64>, iq: usize) -> DVector<f64> {
        let mut r = DVector::zeros(iq);
        for i in (0..iq).rev() {
            let mut sum = d[i];
            for k in i + 1..iq {
                sum -= self.r[(i, k)] * r[k];
            }
            r[i] = sum / self.r[(i, i)];
        }
        r
    }

    /// Append a constraint whose transformed normal is `d = Jᵀ n`. Returns
    /// `false` when the normal is linearly dependent on the active ones.
    fn add(&mut self, d: &mut DVector<f64>, iq: usize) -> bool {
        let n = self.n;
        for j in (iq + 1..n).rev() {
            let (mut cc, mut ss) = (d[j - 1], d[j]);
            let h = cc.hypot(ss);
            if h == 0.0 {
                continue;
            }
            d[j] = 0.0;
            ss /= h;
            cc /= h;
            if cc < 0.0 {
                cc = -cc;
                ss = -ss;
                d[j - 1] = -h;
            } else {
                d[j - 1] = h;
            }
            let xny = ss / (1.0 + cc);
            for k in 0..n {
                let t1 = self.j[(k, j - 1)];
                let t2 = self.j[(k, j)];
                let a = t1 * cc + t2 * ss;
                self.j[(k, j - 1)] = a;
                self.j[(k, j)] = xny * (t1 + a) - t2;
            }
        }
        for i in 0..=iq {
            self.r[(i, iq)] = d[i];
        }
        if d[iq].abs() <= f64::EPSILON * self.r_norm {
            return false;
        }
        self.r_norm = self.r_norm.max(d[iq].abs());
        true
    }

    /// Remove active column `qq` (of `iq` columns) and restore triangularity.
    fn remove(&mut self, qq: usize, iq: usize) {
        let n = self.n;
        for i in qq..iq - 1 {
            for k in 0..n {
                self.r[(k, i)] = self.r[(k, i + 1)];
            }
        }
        for k in 0..n {
            self.r[(k, iq - 1)] = 0.0;
        }
        let iq = iq - 1;
        for j in qq..iq {
            let (mut cc, mut ss) = (self.r[(j, j)], self.r[(j + 1, j)]);
            let h = cc.hypot(ss);
            if h == 0.0 {
                continue;
            }
            cc /= h;
            ss /= h;
            self.r[(j + 1, j)] = 0.0;
            if cc < 0.0 {
                self.r[(j, j)] = -h;
                cc = -cc;
                ss = -ss;
            } else {
                self.r[(j, j)] = h;
            }
            let xny = ss / (1.0 + cc);
            for k in j + 1..iq {
                let t1 = self.r[(j, k)];
                let t2 = self.r[(j + 1, k)];
                let a = t1 * cc + t2 * ss;
                self.r[(j, k)] = a;
                self.r[(j + 1, k)] = xny * (t1 + a) - t2;
            }
            for k in 0..n {
                let t1 = self.j[(k, j)];
                let t2 = self.j[(k, j + 1)];
                let a = t1 * cc + t2 * ss;
                self.j[(k, j)] = a;
                self.j[(k, j + 1)] = xny * (a + t1) - t2;
            }
        }
    }
}

fn row_vector(m: &DMatrix<f64>, i: usize) -> DVector<f64> {
    m.row(i).transpose()
}

/// Solve a strictly convex QP.
pub fn solve(problem: &QpProblem) -> Result<QpSolution, QpError> {
    problem.check_dimensions()?;
    let n = problem.dim();
    let me = problem.eq_vector.len();
    let mi = problem.ineq_vector.len();

    let chol = problem
        .hessian
        .clone()
        .cholesky()
        .ok_or(QpError::NotPositiveDefinite)?;
    let l = chol.l();
    // J = L⁻ᵀ
    let lt = l.transpose();
    let j = lt
        .solve_upper_triangular(&DMatrix::identity(n, n))
        .ok_or(QpError::NotPositiveDefinite)?;
    let mut fac = Factor {
        n,
        j,
        r: DMatrix::zeros(n, n),
        r_norm: 1.0,
    };

    let mut x = -chol.solve(&problem.linear);
    let mut active: Vec<Active> = Vec::with_capacity(n);
    // u[k] pairs with active[k]; an extra slot holds the entering multiplier
    let mut u: Vec<f64> = Vec::with_capacity(n + 1);

    for i in 0..me {
        let np = row_vector(&problem.eq_matrix, i);
        let iq = active.len();
        let mut d = fac.j.transpose() * &np;
        let z = fac.step_direction(&d, iq);
        let r = fac.dual_direction(&d, iq);
        let zn = z.dot(&np);
        let t2 = if z.dot(&z) > f64::EPSILON * f64::EPSILON * fac.r_norm.max(1.0) && zn.abs() > 0.0 {
            -(np.dot(&x) + problem.eq_vector[i]) / zn
        } else {
            0.0
        };
        x.axpy(t2, &z, 1.0);
        for k in 0..iq {
            u[k] -= t2 * r[k];
        }
        u.push(t2);
        active.push(Active::Eq(i));
        if !fac.add(&mut d, iq) {
            return Err(QpError::DependentEqualities);
        }
    }
    // dependent-but-consistent equalities are rejected above; inconsistent
    // ones cannot be detected there when z vanishes, so verify residuals
    for i in 0..me {
        let res = problem.eq_matrix.row(i).dot(&x.transpose()) + problem.eq_vector[i];
        let scale = 1.0 + problem.eq_vector[i].abs() + problem.eq_matrix.row(i).amax() * x.amax();
        if res.abs() > 1e-9 * scale {
            return Err(QpError::DependentEqualities);
        }
    }

    let max_iter = 10 * (n + mi);
    let mut iterations = 0usize;
    let mut is_active = vec![false; mi];
    let row_norms: Vec<f64> = (0..mi).map(|i| problem.ineq_matrix.row(i).norm()).collect();
    let slack = |x: &DVector<f64>, i: usize| problem.ineq_matrix.row(i).dot(&x.transpose()) + problem.ineq_vector[i];
    let tolerance = |x: &DVector<f64>, i: usize| {
        1e-12 * (1.0 + problem.ineq_vector[i].abs() + row_norms[i] * x.amax())
    };

    'outer: loop {
        // step 1: pick the most violated inactive inequality
        let mut worst: Option<(usize, f64)> = None;
        for i in 0..mi {
            if is_active[i] {
                continue;
            }
            let s = slack(&x, i);
            if s < -tolerance(&x, i) {
                let scaled = s / row_norms[i].max(f64::MIN_POSITIVE);
                if worst.is_none_or(|(_, w)| scaled < w) {
                    worst = Some((i, scaled));
                }
            }
        }
        let Some((p, _)) = worst else {
            break;
        };
        let np = row_vector(&problem.ineq_matrix, p);
        u.push(0.0);

        // step 2: move toward satisfying constraint p
        loop {
            iterations += 1;
            if iterations > max_iter {
                return Err(QpError::MaxIterations(max_iter));
            }
            let iq = active.len();
            let mut d = fac.j.transpose() * &np;
            let z = fac.step_direction(&d, iq);
            let r = fac.dual_direction(&d, iq);

            // partial step length (dual), blocking on an active inequality
            let mut t1 = f64::INFINITY;
            let mut leaving: Option<usize> = None;
            for k in 0..iq {
                if let Active::Ineq(_) = active[k] {
                    if r[k] > 0.0 {
                        let t = u[k] / r[k];
                        if t < t1 {
                            t1 = t;
                            leaving = Some(k);
                        }
                    }
                }
            }
            // full step length (primal)
            let zn = z.dot(&np);
            let z_small = z.amax() <= 1e-14 * fac.j.amax().max(1.0) * np.amax().max(1.0);
            let t2 = if !z_small && zn > 0.0 {
                -slack(&x, p) / zn
            } else {
                f64::INFINITY
            };
            let t = t1.min(t2);

            if !t.is_finite() {
                let mut set: Vec<usize> = active
                    .iter()
                    .filter_map(|a| match a {
                        Active::Ineq(i) => Some(*i),
                        Active::Eq(_) => None,
                    })
                    .collect();
                set.sort_unstable();
                return Err(QpError::Infeasible {
                    violated: p,
                    active: set,
                });
            }

            if !t2.is_finite() {
                // step in dual space only, then drop the blocking constraint
                for k in 0..iq {
                    u[k] -= t * r[k];
                }
                u[iq] += t;
                let qq = leaving.expect("finite t1 has a blocking constraint");
                drop_active(&mut fac, &mut active, &mut u, &mut is_active, qq);
                continue;
            }

            x.axpy(t, &z, 1.0);
            for k in 0..iq {
                u[k] -= t * r[k];
            }
            u[iq] += t;

            if t == t2 {
                // full step: constraint p becomes active
                if !fac.add(&mut d, iq) {
                    // numerically dependent on the active set: it is already
                    // satisfied to working precision, so leave it inactive
                    u.pop();
                    if slack(&x, p) < -1e3 * tolerance(&x, p) {
                        let mut set: Vec<usize> = active
                            .iter()
                            .filter_map(|a| match a {
                                Active::Ineq(i) => Some(*i),
                                Active::Eq(_) => None,
                            })
                            .collect();
                        set.sort_unstable();
                        return Err(QpError::Infeasible {
                            violated: p,
                            active: set,
                        });
                    }
                    continue 'outer;
                }
                active.push(Active::Ineq(p));
                is_active[p] = true;
                continue 'outer;
            }
            let qq = leaving.expect("partial step has a blocking constraint");
            drop_active(&mut fac, &mut active, &mut u, &mut is_active, qq);
        }
    }

    let mut eq_multipliers = DVector::zeros(me);
    let mut ineq_multipliers = DVector::zeros(mi);
    let mut active_set = Vec::new();
    for (k, a) in active.iter().enumerate() {
        match *a {
            Active::Eq(i) => eq_multipliers[i] = u[k],
            Active::Ineq(i) => {
                ineq_multipliers[i] = u[k];
                active_set.push(i);
            }
        }
    }
    active_set.sort_unstable();
    Ok(QpSolution {
        objective: problem.objective(&x),
        x,
        active_set,
        eq_multipliers,
        ineq_multipliers,
        iterations,
    })
}

fn drop_active(
    fac: &mut Factor,
    active: &mut Vec<Active>,
    u: &mut Vec<f64>,
    is_active: &mut [bool],
    qq: usize,
) {
    let iq = active.len();
    if let Active::Ineq(i) = active[qq] {
        is_active[i] = false;
    }
    fac.remove(qq, iq);
    active.remove(qq);
    u.remove(qq);
}

/// KKT residuals of a candidate solution: (stationarity, equality,
/// worst inequality violation, worst complementarity product).
pub fn kkt_residuals(problem: &QpProblem, sol: &QpSolution) -> (f64, f64, f64, f64) {
    let grad = &problem.hessian * &sol.x + &problem.linear
        - problem.eq_matrix.transpose() * &sol.eq_multipliers
        - problem.ineq_matrix.transpose() * &sol.ineq_multipliers;
    let stationarity = grad.amax() / (1.0 + problem.linear.amax());
    let eq = if problem.eq_vector.is_empty() {
        0.0
    } else {
        (&problem.eq_matrix * &sol.x + &problem.eq_vector).amax()
    };
    let slack = &problem.ineq_matrix * &sol.x + &problem.ineq_vector;
    let violation = slack.iter().fold(0.0f64, |m, s| m.max(-s));
    let complementarity = slack
        .iter()
        .zip(sol.ineq_multipliers.iter())
        .fold(0.0f64, |m, (s, l)| m.max((s * l).abs()));
    (stationarity, eq, violation, complementarity)
}
