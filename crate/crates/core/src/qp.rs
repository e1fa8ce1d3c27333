//! Dense strictly convex QP solver.
//!
//! Solves
//!
//! ```text
//!   minimize    1/2 u'Hu + f'u
//!   subject to  A u <= b
//! ```
//!
//! with `H` symmetric positive definite, using the dual active-set method of
//! Goldfarb and Idnani. The iteration starts at the unconstrained minimizer and
//! adds violated constraints one at a time while keeping the multipliers dual
//! feasible; the factor `J = L^{-T} Q` and the triangular `R` are updated with
//! Givens rotations on every add/drop. No feasible starting point is needed,
//! and an inconsistent set of constraints is reported as [`QpStatus::Infeasible`].

use nalgebra::{Cholesky, DMatrix, DVector};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum QpError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("hessian is not positive definite")]
    NotPositiveDefinite,
}

/// `minimize 1/2 u'Hu + f'u  s.t.  A u <= b`.
#[derive(Debug, Clone, PartialEq)]
pub struct QpProblem {
    pub h: DMatrix<f64>,
    pub f: DVector<f64>,
    pub a: DMatrix<f64>,
    pub b: DVector<f64>,
}

impl QpProblem {
    pub fn new(
        h: DMatrix<f64>,
        f: DVector<f64>,
        a: DMatrix<f64>,
        b: DVector<f64>,
    ) -> Result<Self, QpError> {
        let n = f.len();
        if h.nrows() != n || h.ncols() != n {
            return Err(QpError::Dimension(format!(
                "H is {}x{}, expected {n}x{n}",
                h.nrows(),
                h.ncols()
            )));
        }
        if a.nrows() != b.len() || (a.nrows() > 0 && a.ncols() != n) {
            return Err(QpError::Dimension(format!(
                "A is {}x{}, b has {} entries, n = {n}",
                a.nrows(),
                a.ncols(),
                b.len()
            )));
        }
        Ok(Self { h, f, a, b })
    }

    /// Problem without inequality constraints.
    pub fn unconstrained(h: DMatrix<f64>, f: DVector<f64>) -> Result<Self, QpError> {
        let n = f.len();
        Self::new(h, f, DMatrix::zeros(0, n), DVector::zeros(0))
    }

    pub fn num_vars(&self) -> usize {
        self.f.len()
    }

    pub fn num_constraints(&self) -> usize {
        self.b.len()
    }

    pub fn objective(&self, u: &DVector<f64>) -> f64 {
        0.5 * u.dot(&(&self.h * u)) + self.f.dot(u)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QpStatus {
    Optimal,
    Infeasible,
    MaxIter,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QpSolution {
    pub u_star: DVector<f64>,
    /// One multiplier per inequality row, zero for inactive rows.
    pub lambda: DVector<f64>,
    pub status: QpStatus,
    /// Max of stationarity, primal-feasibility and complementarity residuals.
    pub kkt_residual: f64,
    pub iterations: usize,
    pub active_set: Vec<usize>,
}

impl QpSolution {
    pub fn is_optimal(&self) -> bool {
        self.status == QpStatus::Optimal
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QpSettings {
    /// Feasibility tolerance on `A u - b`.
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for QpSettings {
    fn default() -> Self {
        Self {
            tol: 1e-8,
            max_iter: 200,
        }
    }
}

/// Residuals of the KKT conditions at `(u, lambda)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KktResiduals {
    pub stationarity: f64,
    pub primal: f64,
    pub dual: f64,
    pub complementarity: f64,
}

impl KktResiduals {
    pub fn max(&self) -> f64 {
        self.stationarity
            .max(self.primal)
            .max(self.dual)
            .max(self.complementarity)
    }
}

pub fn kkt_residuals(p: &QpProblem, u: &DVector<f64>, lambda: &DVector<f64>) -> KktResiduals {
    let grad = &p.h * u + &p.f + p.a.transpose() * lambda;
    let slack = &p.b - &p.a * u;
    let primal = slack.iter().fold(0.0f64, |m, &s| m.max(-s));
    let dual = lambda.iter().fold(0.0f64, |m, &l| m.max(-l));
    let complementarity = lambda
        .iter()
        .zip(slack.iter())
        .fold(0.0f64, |m, (&l, &s)| m.max((l * s).abs()));
    KktResiduals {
        stationarity: grad.amax(),
        primal,
        dual,
        complementarity,
    }
}

/// Reusable solver. Holds the factor workspace so repeated solves of
/// same-sized problems do not reallocate.
#[derive(Debug, Clone)]
pub struct QpSolver {
    pub settings: QpSettings,
    j: DMatrix<f64>,
    r: DMatrix<f64>,
}

impl Default for QpSolver {
    fn default() -> Self {
        Self::new(QpSettings::default())
    }
}

fn givens(a: f64, b: f64) -> (f64, f64, f64) {
    let rho = a.hypot(b);
    if rho == 0.0 {
        (1.0, 0.0, 0.0)
    } else {
        (a / rho, b / rho, rho)
    }
}

/// Rotate columns `i` and `k` of `m`: `(ci, ck) <- (c ci + s ck, -s ci + c ck)`.
fn rotate_columns(m: &mut DMatrix<f64>, i: usize, k: usize, c: f64, s: f64) {
    for row in 0..m.nrows() {
        let x = m[(row, i)];
        let y = m[(row, k)];
        m[(row, i)] = c * x + s * y;
        m[(row, k)] = -s * x + c * y;
    }
}

impl QpSolver {
    pub fn new(settings: QpSettings) -> Self {
        Self {
            settings,
            j: DMatrix::zeros(0, 0),
            r: DMatrix::zeros(0, 0),
        }
    }

    /// Solve `p`. Rows that are active at `warm_start` are preferred when
    /// choosing which violated constraint to add next, which tends to shorten
    /// the active-set path when the hint is close to the solution. The hint
    /// never changes which point is returned.
    pub fn solve(
        &mut self,
        p: &QpProblem,
        warm_start: Option<&DVector<f64>>,
    ) -> Result<QpSolution, QpError> {
        let n = p.num_vars();
        let m = p.num_constraints();
        let tol = self.settings.tol;

        let chol = Cholesky::new(p.h.clone()).ok_or(QpError::NotPositiveDefinite)?;
        let l = chol.l();
        // J = L^{-T}
        let l_inv = l
            .clone()
            .solve_lower_triangular(&DMatrix::identity(n, n))
            .ok_or(QpError::NotPositiveDefinite)?;
        self.j = l_inv.transpose();
        if self.r.nrows() != n {
            self.r = DMatrix::zeros(n, n);
        } else {
            self.r.fill(0.0);
        }

        let mut hinted = vec![false; m];
        if let Some(w) = warm_start {
            if w.len() != n {
                return Err(QpError::Dimension(format!(
                    "warm start has {} entries, expected {n}",
                    w.len()
                )));
            }
            let slack = &p.b - &p.a * w;
            for (i, s) in slack.iter().enumerate() {
                hinted[i] = s.abs() <= 1e-6 * (1.0 + p.b[i].abs());
            }
        }

        let mut x = -chol.solve(&p.f);
        let mut active: Vec<usize> = Vec::with_capacity(n);
        let mut is_active = vec![false; m];
        let mut lam: Vec<f64> = Vec::with_capacity(n);
        let mut iterations = 0usize;
        let mut status = QpStatus::Optimal;

        'outer: loop {
            // pick the constraint to add
            let slack = &p.b - &p.a * &x;
            let mut pick: Option<(usize, f64, bool)> = None;
            for i in 0..m {
                if is_active[i] || slack[i] >= -tol {
                    continue;
                }
                let better = match pick {
                    None => true,
                    Some((_, best, best_hint)) => {
                        (hinted[i] && !best_hint) || (hinted[i] == best_hint && slack[i] < best)
                    }
                };
                if better {
                    pick = Some((i, slack[i], hinted[i]));
                }
            }
            let Some((pc, _, _)) = pick else {
                break;
            };

            let np: DVector<f64> = -p.a.row(pc).transpose();
            let mut u_plus = lam.clone();
            u_plus.push(0.0);

            loop {
                if iterations >= self.settings.max_iter {
                    status = QpStatus::MaxIter;
                    break 'outer;
                }
                iterations += 1;
                let q = active.len();
                let d = self.j.transpose() * &np;
                let d2_norm = d.rows(q, n - q).norm();
                let z = self.j.columns(q, n - q) * d.rows(q, n - q);
                let mut r = DVector::zeros(q);
                if q > 0 {
                    r = self
                        .r
                        .view((0, 0), (q, q))
                        .solve_upper_triangular(&d.rows(0, q))
                        .unwrap_or_else(|| DVector::zeros(q));
                }

                let mut t1 = f64::INFINITY;
                let mut drop_k = None;
                for k in 0..q {
                    if r[k] > 0.0 {
                        let t = u_plus[k] / r[k];
                        if t < t1 {
                            t1 = t;
                            drop_k = Some(k);
                        }
                    }
                }
                let dependent = d2_norm <= 1e-12 * d.norm().max(1e-300);
                let t2 = if dependent {
                    f64::INFINITY
                } else {
                    let s_p = p.b[pc] - p.a.row(pc).dot(&x.transpose());
                    (-s_p / (d2_norm * d2_norm)).max(0.0)
                };

                if t1.is_infinite() && t2.is_infinite() {
                    status = QpStatus::Infeasible;
                    break 'outer;
                }

                let t = t1.min(t2);
                if !dependent {
                    x += &z * t;
                }
                for k in 0..q {
                    u_plus[k] -= t * r[k];
                }
                u_plus[q] += t;

                if t2 <= t1 {
                    // full step: add pc
                    let mut d = d;
                    for jj in ((q + 1)..n).rev() {
                        let (c, s, rho) = givens(d[jj - 1], d[jj]);
                        d[jj - 1] = rho;
                        d[jj] = 0.0;
                        if s != 0.0 || c != 1.0 {
                            rotate_columns(&mut self.j, jj - 1, jj, c, s);
                        }
                    }
                    for i in 0..=q {
                        self.r[(i, q)] = d[i];
                    }
                    active.push(pc);
                    is_active[pc] = true;
                    lam = u_plus;
                    continue 'outer;
                }

                // partial step: drop the blocking active constraint
                let k = drop_k.expect("finite t1 has a blocking index");
                is_active[active[k]] = false;
                active.remove(k);
                u_plus.remove(k);
                self.drop_column(k, q);
            }
        }

        let mut lambda = DVector::zeros(m);
        for (k, &i) in active.iter().enumerate() {
            lambda[i] = lam.get(k).copied().unwrap_or(0.0);
        }
        let kkt_residual = kkt_residuals(p, &x, &lambda).max();
        Ok(QpSolution {
            u_star: x,
            lambda,
            status,
            kkt_residual,
            iterations,
            active_set: active,
        })
    }

    /// Remove column `k` of the `q`-column triangular factor and restore the
    /// triangular shape with row rotations (mirrored on the columns of `J`).
    fn drop_column(&mut self, k: usize, q: usize) {
        for col in k..q - 1 {
            for row in 0..q {
                self.r[(row, col)] = self.r[(row, col + 1)];
            }
        }
        for row in 0..q {
            self.r[(row, q - 1)] = 0.0;
        }
        for jj in k..q - 1 {
            let (c, s, rho) = givens(self.r[(jj, jj)], self.r[(jj + 1, jj)]);
            self.r[(jj, jj)] = rho;
            self.r[(jj + 1, jj)] = 0.0;
            if s == 0.0 && c == 1.0 {
                continue;
            }
            for col in (jj + 1)..(q - 1) {
                let a = self.r[(jj, col)];
                let b = self.r[(jj + 1, col)];
                self.r[(jj, col)] = c * a + s * b;
                self.r[(jj + 1, col)] = -s * a + c * b;
            }
            rotate_columns(&mut self.j, jj, jj + 1, c, s);
        }
    }
}

/// One-shot solve with explicit tolerance and iteration cap.
pub fn solve_qp(
    p: &QpProblem,
    warm_start: Option<&DVector<f64>>,
    tol: f64,
    max_iter: usize,
) -> Result<QpSolution, QpError> {
    QpSolver::new(QpSettings { tol, max_iter }).solve(p, warm_start)
}
