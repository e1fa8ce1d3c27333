//! Condensed per-agent optimal control problem.
//!
//! The states are eliminated through the stacked prediction, so the only
//! decision variable is the control sequence `u = (u_0, .., u_{N-1})`. The
//! result is a QCQP: quadratic tracking/comfort cost, linear input and speed
//! rows (plus an optional terminal crossing row), and one nonconvex quadratic
//! row per (higher-priority neighbor, prediction step) that may come closer
//! than the safety distance.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dynamics::{AgentModel, AgentState, CondensedPrediction};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum OcpError {
    #[error("invalid weights: {0}")]
    Weights(String),
    #[error("invalid limits: {0}")]
    Limits(String),
    #[error("neighbor {neighbor_id}: expected {expected} distances, got {got}")]
    NeighborLength {
        neighbor_id: u8,
        expected: usize,
        got: usize,
    },
    #[error("collision point for neighbor {0} is not finite")]
    CollisionPoint(u8),
    #[error("horizon must be at least 1")]
    EmptyHorizon,
}

/// Cost weights: terminal/stage speed tracking `q_n`/`q`, input step `r`,
/// input magnitude `s_w`; `rho_x` weights the speed-constraint slack.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OcpWeights {
    pub q: f64,
    pub q_n: f64,
    pub r: f64,
    pub s_w: f64,
    pub rho_x: f64,
}

impl OcpWeights {
    pub fn validate(&self) -> Result<(), OcpError> {
        for (name, w) in [
            ("q", self.q),
            ("q_n", self.q_n),
            ("r", self.r),
            ("s", self.s_w),
            ("rho_x", self.rho_x),
        ] {
            if !(w > 0.0 && w.is_finite()) {
                return Err(OcpError::Weights(format!("{name} = {w} must be > 0")));
            }
        }
        Ok(())
    }
}

impl Default for OcpWeights {
    fn default() -> Self {
        Self {
            q: 1.0,
            q_n: 1.0,
            r: 5.0,
            s_w: 5.0,
            rho_x: 1e3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OcpLimits {
    pub u_min: f64,
    pub u_max: f64,
    pub v_max_seq: Vec<f64>,
    pub v_ref_seq: Vec<f64>,
}

impl OcpLimits {
    /// Constant speed reference and limit over an `n`-step horizon.
    pub fn constant(u_min: f64, u_max: f64, v_ref: f64, v_max: f64, n: usize) -> Self {
        Self {
            u_min,
            u_max,
            v_max_seq: vec![v_max; n],
            v_ref_seq: vec![v_ref; n],
        }
    }

    pub fn validate(&self, n: usize) -> Result<(), OcpError> {
        if !(self.u_min < self.u_max) {
            return Err(OcpError::Limits(format!(
                "u_min ({}) must be below u_max ({})",
                self.u_min, self.u_max
            )));
        }
        if self.v_max_seq.len() != n || self.v_ref_seq.len() != n {
            return Err(OcpError::Limits(format!(
                "speed sequences must have {n} entries (v_max: {}, v_ref: {})",
                self.v_max_seq.len(),
                self.v_ref_seq.len()
            )));
        }
        if self.v_max_seq.iter().any(|v| !(*v >= 0.0)) {
            return Err(OcpError::Limits("v_max must be nonnegative".into()));
        }
        Ok(())
    }
}

/// Interval of the path where crossing conflicts can happen, plus the
/// braking distance ahead of it where the terminal row switches on.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CriticalRegion {
    pub s_in: f64,
    pub s_out: f64,
    pub d_brake: f64,
}

impl CriticalRegion {
    /// Region spanning the given collision points widened by `d_safe`.
    pub fn around(collision_points: &[f64], d_safe: f64, d_brake: f64) -> Option<Self> {
        let nearest = collision_points.iter().copied().reduce(f64::min)?;
        let farthest = collision_points.iter().copied().reduce(f64::max)?;
        Some(Self {
            s_in: nearest - d_safe,
            s_out: farthest + d_safe,
            d_brake,
        })
    }
}

/// Predicted distances of a neighbor to the joint collision point for
/// steps `k+1 .. k+N`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NeighborParam {
    pub neighbor_id: u8,
    pub d_seq: Vec<f64>,
}

/// `1/2 u'Hu + f'u + c`.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadCost {
    pub h: DMatrix<f64>,
    pub f: DVector<f64>,
    pub c: f64,
}

impl QuadCost {
    pub fn eval(&self, u: &DVector<f64>) -> f64 {
        0.5 * u.dot(&(&self.h * u)) + self.f.dot(u) + self.c
    }

    fn zeros(n: usize) -> Self {
        Self {
            h: DMatrix::zeros(n, n),
            f: DVector::zeros(n),
            c: 0.0,
        }
    }

    /// Accumulate `w (a'u - b)^2`.
    fn add_square(&mut self, w: f64, a: &DVector<f64>, b: f64) {
        self.h.ger(2.0 * w, a, a, 1.0);
        self.f.axpy(-2.0 * w * b, a, 1.0);
        self.c += w * b * b;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RowKind {
    InputUpper,
    InputLower,
    SpeedUpper,
    SpeedLower,
    Terminal,
}

/// Rows `P u + q <= 0`. `soft[i]` marks rows that receive the state slack.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearConstraints {
    pub p: DMatrix<f64>,
    pub q: DVector<f64>,
    pub soft: Vec<bool>,
    pub kind: Vec<RowKind>,
}

impl LinearConstraints {
    pub fn len(&self) -> usize {
        self.q.len()
    }

    pub fn is_empty(&self) -> bool {
        self.q.is_empty()
    }

    pub fn residuals(&self, u: &DVector<f64>) -> DVector<f64> {
        &self.p * u + &self.q
    }
}

/// `u'Pu + q'u + r <= 0` at prediction step `step` (1-based) against
/// `neighbor_id`. `P` is negative semidefinite (rank one here).
#[derive(Debug, Clone, PartialEq)]
pub struct QuadConstraint {
    pub p: DMatrix<f64>,
    pub q: DVector<f64>,
    pub r: f64,
    pub step: usize,
    pub neighbor_id: u8,
}

impl QuadConstraint {
    pub fn residual(&self, u: &DVector<f64>) -> f64 {
        u.dot(&(&self.p * u)) + self.q.dot(u) + self.r
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CondensedDocp {
    pub cost: QuadCost,
    pub lin_cons: LinearConstraints,
    pub quad_cons: Vec<QuadConstraint>,
    pub n: usize,
}

impl CondensedDocp {
    /// True when no nonconvex rows are present.
    pub fn is_convex(&self) -> bool {
        self.quad_cons.is_empty()
    }
}

/// Condensed tracking/comfort cost with `u_{-1} = u_prev`.
pub fn build_cost(
    model: &AgentModel,
    x0: &AgentState,
    u_prev: f64,
    weights: &OcpWeights,
    v_ref_seq: &[f64],
) -> QuadCost {
    let pred = CondensedPrediction::new(model, x0, v_ref_seq.len());
    cost_from_prediction(&pred, u_prev, weights, v_ref_seq)
}

fn cost_from_prediction(
    pred: &CondensedPrediction,
    u_prev: f64,
    weights: &OcpWeights,
    v_ref_seq: &[f64],
) -> QuadCost {
    let n = pred.horizon();
    let mut cost = QuadCost::zeros(n);
    for j in 1..=n {
        let (row, offset) = pred.speed.row(j);
        let w = if j == n { weights.q_n } else { weights.q };
        cost.add_square(w, &row, v_ref_seq[j - 1] - offset);
    }
    for j in 0..n {
        let mut a = DVector::zeros(n);
        a[j] = 1.0;
        if j == 0 {
            cost.add_square(weights.r, &a, u_prev);
        } else {
            a[j - 1] = -1.0;
            cost.add_square(weights.r, &a, 0.0);
        }
        let mut e = DVector::zeros(n);
        e[j] = 1.0;
        cost.add_square(weights.s_w, &e, 0.0);
    }
    cost
}

/// Input bounds (hard), `0 <= v <= v_max` per step (soft) and, when
/// `terminal_active`, `s_{k+N} >= s_out` (hard).
pub fn build_agent_constraints(
    model: &AgentModel,
    x0: &AgentState,
    limits: &OcpLimits,
    critical: Option<&CriticalRegion>,
    terminal_active: bool,
) -> LinearConstraints {
    let pred = CondensedPrediction::new(model, x0, limits.v_ref_seq.len());
    constraints_from_prediction(&pred, limits, critical, terminal_active)
}

fn constraints_from_prediction(
    pred: &CondensedPrediction,
    limits: &OcpLimits,
    critical: Option<&CriticalRegion>,
    terminal_active: bool,
) -> LinearConstraints {
    let n = pred.horizon();
    let terminal = terminal_active && critical.is_some();
    let rows = 4 * n + usize::from(terminal);
    let mut p = DMatrix::zeros(rows, n);
    let mut q = DVector::zeros(rows);
    let mut soft = Vec::with_capacity(rows);
    let mut kind = Vec::with_capacity(rows);
    let mut i = 0;
    for j in 0..n {
        p[(i, j)] = 1.0;
        q[i] = -limits.u_max;
        soft.push(false);
        kind.push(RowKind::InputUpper);
        i += 1;
        p[(i, j)] = -1.0;
        q[i] = limits.u_min;
        soft.push(false);
        kind.push(RowKind::InputLower);
        i += 1;
    }
    for j in 1..=n {
        let (row, offset) = pred.speed.row(j);
        p.row_mut(i).copy_from(&row.transpose());
        q[i] = offset - limits.v_max_seq[j - 1];
        soft.push(true);
        kind.push(RowKind::SpeedUpper);
        i += 1;
        p.row_mut(i).copy_from(&(-row).transpose());
        q[i] = -offset;
        soft.push(true);
        kind.push(RowKind::SpeedLower);
        i += 1;
    }
    if terminal {
        let cr = critical.expect("checked above");
        let (row, offset) = pred.position.row(n);
        p.row_mut(i).copy_from(&(-row).transpose());
        q[i] = cr.s_out - offset;
        soft.push(false);
        kind.push(RowKind::Terminal);
    }
    LinearConstraints { p, q, soft, kind }
}

/// Whether the terminal crossing row must be imposed at path coordinate `s_k`.
pub fn terminal_constraint_active(
    s_k: f64,
    critical: &CriticalRegion,
    higher_priority_conflicts_present: bool,
) -> bool {
    higher_priority_conflicts_present
        && s_k >= critical.s_in - critical.d_brake
        && s_k <= critical.s_out
}

/// Squared collision rows `-(s_{k+j} - s_c)^2 + (d_safe - d_j)^2 <= 0` for
/// every step where the neighbor is closer than `d_safe` to the collision
/// point. `s_c[i]` is the collision point with `neighbors[i]`.
pub fn build_collision_constraints(
    model: &AgentModel,
    x0: &AgentState,
    neighbors: &[NeighborParam],
    s_c: &[f64],
    d_safe: f64,
    n: usize,
) -> Result<Vec<QuadConstraint>, OcpError> {
    let pred = CondensedPrediction::new(model, x0, n);
    collisions_from_prediction(&pred, neighbors, s_c, d_safe)
}

fn collisions_from_prediction(
    pred: &CondensedPrediction,
    neighbors: &[NeighborParam],
    s_c: &[f64],
    d_safe: f64,
) -> Result<Vec<QuadConstraint>, OcpError> {
    let n = pred.horizon();
    let mut out = Vec::new();
    for (nb, &sc) in neighbors.iter().zip(s_c) {
        if nb.d_seq.len() != n {
            return Err(OcpError::NeighborLength {
                neighbor_id: nb.neighbor_id,
                expected: n,
                got: nb.d_seq.len(),
            });
        }
        if !sc.is_finite() {
            return Err(OcpError::CollisionPoint(nb.neighbor_id));
        }
        for j in 1..=n {
            let gap = d_safe - nb.d_seq[j - 1];
            if !(gap > 0.0) {
                continue;
            }
            // s_j - s_c = g'u + h
            let (g, offset) = pred.position.row(j);
            let h = offset - sc;
            let mut p = DMatrix::zeros(n, n);
            p.ger(-1.0, &g, &g, 0.0);
            out.push(QuadConstraint {
                p,
                q: &g * (-2.0 * h),
                r: gap * gap - h * h,
                step: j,
                neighbor_id: nb.neighbor_id,
            });
        }
    }
    Ok(out)
}

/// Everything needed to set up one agent's problem at one time step.
#[derive(Debug, Clone)]
pub struct DocpInputs<'a> {
    pub model: &'a AgentModel,
    pub x0: AgentState,
    pub u_prev: f64,
    pub weights: &'a OcpWeights,
    pub limits: &'a OcpLimits,
    pub critical: Option<CriticalRegion>,
    pub terminal_active: bool,
    pub neighbors: &'a [NeighborParam],
    /// Collision point per entry of `neighbors`.
    pub s_c: &'a [f64],
    pub d_safe: f64,
}

pub fn assemble_docp(inputs: &DocpInputs<'_>) -> Result<CondensedDocp, OcpError> {
    let n = inputs.limits.v_ref_seq.len();
    if n == 0 {
        return Err(OcpError::EmptyHorizon);
    }
    inputs.weights.validate()?;
    inputs.limits.validate(n)?;
    if inputs.neighbors.len() != inputs.s_c.len() {
        return Err(OcpError::Limits(format!(
            "{} neighbors but {} collision points",
            inputs.neighbors.len(),
            inputs.s_c.len()
        )));
    }
    let pred = CondensedPrediction::new(inputs.model, &inputs.x0, n);
    Ok(CondensedDocp {
        cost: cost_from_prediction(
            &pred,
            inputs.u_prev,
            inputs.weights,
            &inputs.limits.v_ref_seq,
        ),
        lin_cons: constraints_from_prediction(
            &pred,
            inputs.limits,
            inputs.critical.as_ref(),
            inputs.terminal_active,
        ),
        quad_cons: collisions_from_prediction(&pred, inputs.neighbors, inputs.s_c, inputs.d_safe)?,
        n,
    })
}
