//! Penalty convex-concave procedure.
//!
//! Each iteration replaces every collision row by its first-order expansion
//! at the current iterate. Because the quadratic part is concave, the
//! expansion lies above the original residual everywhere, so any point that
//! satisfies the linearized row also satisfies the original one. Violations
//! are absorbed by nonnegative slacks whose penalty grows geometrically.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dynamics::AgentState;
use crate::ocp::{CondensedDocp, QuadConstraint};
use crate::qp::{QpError, QpProblem, QpSolver, QpStatus};

/// Slack curvature relative to the slack's linear weight. The unconstrained
/// minimum of every slack sits at `-1 / SLACK_CURVATURE` whatever the penalty.
const SLACK_CURVATURE: f64 = 1e-2;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum CcpError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("initial point has {got} entries, expected {expected}")]
    Dimension { expected: usize, got: usize },
    #[error("hard constraints are inconsistent")]
    Infeasible,
    #[error("qp solver: {0}")]
    Qp(#[from] QpError),
    #[error("qp solver hit its iteration limit")]
    QpMaxIter,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CcpConfig {
    pub rho_c0: f64,
    pub rho_c_max: f64,
    pub mu: f64,
    pub rho_x: f64,
    pub obj_tol: f64,
    pub viol_tol: f64,
    pub max_iter: usize,
}

impl Default for CcpConfig {
    fn default() -> Self {
        Self {
            rho_c0: 1.0,
            rho_c_max: 1e4,
            mu: 3.0,
            rho_x: 1e3,
            obj_tol: 1e-3,
            viol_tol: 1e-3,
            max_iter: 20,
        }
    }
}

impl CcpConfig {
    pub fn validate(&self) -> Result<(), CcpError> {
        let bad = |m: &str| Err(CcpError::Config(m.to_string()));
        if !(self.rho_c0 > 0.0 && self.rho_c0.is_finite()) {
            return bad("rho_c0 must be > 0");
        }
        if !(self.rho_c_max >= self.rho_c0 && self.rho_c_max.is_finite()) {
            return bad("rho_c_max must be >= rho_c0");
        }
        if !(self.mu > 1.0 && self.mu.is_finite()) {
            return bad("mu must be > 1");
        }
        if !(self.rho_x > 0.0 && self.rho_x.is_finite()) {
            return bad("rho_x must be > 0");
        }
        if !(self.obj_tol >= 0.0 && self.viol_tol >= 0.0) {
            return bad("tolerances must be >= 0");
        }
        if self.max_iter == 0 {
            return bad("max_iter must be >= 1");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CcpResult {
    pub u_star: Vec<f64>,
    pub eps_c: Vec<f64>,
    pub eps_x: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Penalized subproblem objective at the returned iterate.
    pub final_cost: f64,
    /// Tracking/comfort part of `final_cost`.
    pub tracking_cost: f64,
    pub rho_c_final: f64,
    pub qp_iterations: usize,
    /// Penalty used in each iteration.
    pub rho_history: Vec<f64>,
}

impl CcpResult {
    pub fn eps_c_l1(&self) -> f64 {
        self.eps_c.iter().sum()
    }
}

/// Linear row `g'u + h <= 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearRow {
    pub g: DVector<f64>,
    pub h: f64,
}

impl LinearRow {
    pub fn residual(&self, u: &DVector<f64>) -> f64 {
        self.g.dot(u) + self.h
    }
}

/// First-order expansion of `u'Pu + q'u + r` at `u_nu`.
pub fn convexify_constraint(quad: &QuadConstraint, u_nu: &DVector<f64>) -> LinearRow {
    let pu = &quad.p * u_nu;
    LinearRow {
        g: &pu * 2.0 + &quad.q,
        h: quad.r - u_nu.dot(&pu),
    }
}

/// `[1,2,3] -> [2,3,3]`.
pub fn warm_start_shift(u_prev_star: &[f64]) -> Vec<f64> {
    match u_prev_star.split_first() {
        None => Vec::new(),
        Some((_, rest)) => {
            let mut out = rest.to_vec();
            out.push(*u_prev_star.last().expect("nonempty"));
            out
        }
    }
}

/// Constant deceleration that stops the agent before `s_in`, saturated at
/// `u_min`.
pub fn fallback_brake(x_k: &AgentState, s_in: f64, u_min: f64, n: usize) -> Vec<f64> {
    let dist = s_in - x_k.s;
    let u = if x_k.v <= 0.0 {
        0.0
    } else if dist <= 0.0 {
        u_min
    } else {
        (-x_k.v * x_k.v / (2.0 * dist)).max(u_min)
    };
    vec![u; n]
}

/// Sparse-free builder for one subproblem. Variable layout is
/// `(u[0..n], eps_x, eps_c[0..n])`.
struct Subproblem<'a> {
    docp: &'a CondensedDocp,
    n: usize,
    nz: usize,
    h: DMatrix<f64>,
    base_rows: DMatrix<f64>,
    base_rhs: DVector<f64>,
}

impl<'a> Subproblem<'a> {
    fn new(docp: &'a CondensedDocp) -> Self {
        let n = docp.n;
        let nz = 2 * n + 1;
        let mut h = DMatrix::zeros(nz, nz);
        h.view_mut((0, 0), (n, n)).copy_from(&docp.cost.h);

        let lin = &docp.lin_cons;
        let m = lin.len() + 1 + n;
        let mut rows = DMatrix::zeros(m, nz);
        let mut rhs = DVector::zeros(m);
        for i in 0..lin.len() {
            let prow = lin.p.row(i);
            let scale = row_scale(prow.norm());
            for c in 0..n {
                rows[(i, c)] = prow[c] / scale;
            }
            if lin.soft[i] {
                rows[(i, n)] = -1.0 / scale;
            }
            rhs[i] = -lin.q[i] / scale;
        }
        // eps >= 0
        for k in 0..=n {
            rows[(lin.len() + k, n + k)] = -1.0;
        }
        Self {
            docp,
            n,
            nz,
            h,
            base_rows: rows,
            base_rhs: rhs,
        }
    }

    fn build(&self, u_nu: &DVector<f64>, rho_x: f64, rho_c: f64) -> Result<QpProblem, QpError> {
        let n = self.n;
        let quads = &self.docp.quad_cons;
        let m0 = self.base_rows.nrows();
        let mut a = DMatrix::zeros(m0 + quads.len(), self.nz);
        a.view_mut((0, 0), (m0, self.nz)).copy_from(&self.base_rows);
        let mut b = DVector::zeros(m0 + quads.len());
        b.rows_mut(0, m0).copy_from(&self.base_rhs);
        for (i, qc) in quads.iter().enumerate() {
            let row = convexify_constraint(qc, u_nu);
            let scale = row_scale(row.g.norm());
            for c in 0..n {
                a[(m0 + i, c)] = row.g[c] / scale;
            }
            a[(m0 + i, n + qc.step)] = -1.0 / scale;
            b[m0 + i] = -row.h / scale;
        }
        let mut f = DVector::zeros(self.nz);
        f.rows_mut(0, n).copy_from(&self.docp.cost.f);
        f[n] = rho_x;
        for k in 0..n {
            f[n + 1 + k] = rho_c;
        }
        let mut h = self.h.clone();
        for i in n..self.nz {
            h[(i, i)] = SLACK_CURVATURE * f[i];
        }
        QpProblem::new(h, f, a, b)
    }
}

fn row_scale(norm: f64) -> f64 {
    if norm > 1e-12 {
        norm
    } else {
        1.0
    }
}

/// Run the penalty CCP from `u0`. Returns `CcpError::Infeasible` when the
/// hard rows (input bounds and terminal row) admit no solution.
pub fn solve_penalty_ccp(
    docp: &CondensedDocp,
    u0: &[f64],
    cfg: &CcpConfig,
    qp: &mut QpSolver,
) -> Result<CcpResult, CcpError> {
    cfg.validate()?;
    let n = docp.n;
    if u0.len() != n {
        return Err(CcpError::Dimension {
            expected: n,
            got: u0.len(),
        });
    }
    let sub = Subproblem::new(docp);
    let mut u_nu = DVector::from_column_slice(u0);
    let mut z_prev: Option<DVector<f64>> = None;
    let mut rho = cfg.rho_c0;
    let mut obj_prev: Option<f64> = None;
    let mut qp_iterations = 0;
    let mut rho_history = Vec::new();

    for iter in 1..=cfg.max_iter {
        let problem = sub.build(&u_nu, cfg.rho_x, rho)?;
        let sol = qp.solve(&problem, z_prev.as_ref())?;
        qp_iterations += sol.iterations;
        match sol.status {
            QpStatus::Optimal => {}
            QpStatus::Infeasible => return Err(CcpError::Infeasible),
            QpStatus::MaxIter => return Err(CcpError::QpMaxIter),
        }
        rho_history.push(rho);
        let z = sol.u_star;
        let u = z.rows(0, n).into_owned();
        let eps_x = z[n].max(0.0);
        let eps_c: Vec<f64> = (0..n).map(|k| z[n + 1 + k].max(0.0)).collect();
        let tracking = docp.cost.eval(&u);
        let l1: f64 = eps_c.iter().sum();
        let obj = tracking + cfg.rho_x * eps_x + rho * l1;

        let at_cap = rho >= cfg.rho_c_max;
        let settled =
            obj_prev.is_some_and(|p| (p - obj).abs() < cfg.obj_tol) && rho * l1 < cfg.viol_tol;
        if at_cap || settled || iter == cfg.max_iter {
            return Ok(CcpResult {
                u_star: u.iter().copied().collect(),
                eps_c,
                eps_x,
                iterations: iter,
                converged: at_cap || settled,
                final_cost: obj,
                tracking_cost: tracking,
                rho_c_final: rho,
                qp_iterations,
                rho_history,
            });
        }
        obj_prev = Some(obj);
        u_nu = u;
        z_prev = Some(z);
        rho = (cfg.mu * rho).min(cfg.rho_c_max);
    }
    unreachable!("loop returns on its last iteration")
}
