//! Per-agent MPC pipeline.
//!
//! One call per synchronized step: place the agent on its path relative to
//! the nearest collision point, read the neighbors' distance trajectories
//! from the messages received at the previous step, set up and solve the
//! local problem, and produce the input to apply plus the outgoing message.

use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ccm::{CcmConflict, CcmMessage};
use crate::ccp::{
    fallback_brake, solve_penalty_ccp, warm_start_shift, CcpConfig, CcpError, CcpResult,
};
use crate::collision::CollisionPointEstimate;
use crate::dynamics::{predict_states, AgentModel, AgentState};
use crate::ocp::{
    assemble_docp, terminal_constraint_active, CriticalRegion, DocpInputs, NeighborParam, OcpError,
    OcpLimits, OcpWeights,
};
use crate::qp::QpSolver;

const INPUT_BOUND_TOL: f64 = 1e-7;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ControllerError {
    #[error(transparent)]
    Ocp(#[from] OcpError),
    #[error(transparent)]
    Ccp(#[from] CcpError),
    #[error("agent {id}: input {u} outside [{u_min}, {u_max}]")]
    InputBound {
        id: u8,
        u: f64,
        u_min: f64,
        u_max: f64,
    },
    #[error("agent {id}: previous solution has {got} entries, expected {expected}")]
    WarmStart { id: u8, expected: usize, got: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct AgentConfig {
    pub id: u8,
    /// Lower value means higher priority; unique across the roster.
    pub priority: u32,
    pub model: AgentModel,
    pub weights: OcpWeights,
    pub limits: OcpLimits,
    pub d_safe: f64,
    pub d_brake: f64,
    pub ccp: CcpConfig,
}

impl AgentConfig {
    pub fn horizon(&self) -> usize {
        self.limits.v_ref_seq.len()
    }
}

/// A CCM as delivered by the bus, tagged with the step it was sent in.
#[derive(Debug, Clone, PartialEq)]
pub struct ReceivedCcm {
    pub msg: CcmMessage,
    pub sent_step: u64,
}

/// What the ego knows about another agent at this step.
#[derive(Debug, Clone, Copy)]
pub struct NeighborInfo<'a> {
    pub id: u8,
    pub priority: u32,
    pub ccm: Option<&'a ReceivedCcm>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StepDiagnostics {
    pub ccp: Option<CcpResult>,
    pub fallback: bool,
    pub terminal_active: bool,
    pub critical: Option<CriticalRegion>,
    pub collision_rows: usize,
    /// Higher-priority conflicting neighbors whose constraints were imposed.
    pub constrained_by: Vec<u8>,
    pub missing: Vec<u8>,
    pub stale: Vec<u8>,
    pub solve_seconds: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ControlOutput {
    pub u_apply: f64,
    pub u_star: Vec<f64>,
    pub x0: AgentState,
    pub ccm_out: CcmMessage,
    pub diagnostics: StepDiagnostics,
}

/// Path coordinate is measured from the nearest collision point ahead
/// (or most recently passed); without any conflict it is zero.
pub fn build_initial_condition(ax: f64, v: f64, cps: &[CollisionPointEstimate]) -> AgentState {
    let nearest = cps
        .iter()
        .filter(|c| c.exists)
        .map(|c| c.signed_distance)
        .fold(f64::INFINITY, f64::min);
    let s = if nearest.is_finite() { -nearest } else { 0.0 };
    AgentState::new(ax, v, s)
}

/// Distance trajectories addressed to `ego_id` from each neighbor in
/// `conflict_set`. Missing or stale messages give `d_seq = 0` at every step.
/// Returns the params and the ids of missing and stale senders.
pub fn gather_neighbor_params(
    rx: &[NeighborInfo<'_>],
    ego_id: u8,
    conflict_set: &[u8],
    step: u64,
    n: usize,
) -> (Vec<NeighborParam>, Vec<u8>, Vec<u8>) {
    let mut params = Vec::with_capacity(conflict_set.len());
    let mut missing = Vec::new();
    let mut stale = Vec::new();
    for &id in conflict_set {
        let rec = rx.iter().find(|r| r.id == id).and_then(|r| r.ccm);
        let d_seq = match rec {
            Some(r) if r.sent_step + 1 < step => {
                stale.push(id);
                None
            }
            Some(r) => match r.msg.distances_for(ego_id) {
                Some(d) if d.len() == n => Some(d.iter().map(|&x| f64::from(x)).collect()),
                _ => {
                    missing.push(id);
                    None
                }
            },
            None => {
                missing.push(id);
                None
            }
        };
        params.push(NeighborParam {
            neighbor_id: id,
            d_seq: d_seq.unwrap_or_else(|| vec![0.0; n]),
        });
    }
    (params, missing, stale)
}

/// One MPC step for one agent.
///
/// `ax`/`v` are the current acceleration and speed estimates, `cps` the
/// collision-point estimates against every other agent, `u_prev` the input
/// applied in the previous step and `u_prev_star` the previous optimal
/// sequence (`None` on the very first step).
#[allow(clippy::too_many_arguments)]
pub fn run_mpc_step(
    cfg: &AgentConfig,
    qp: &mut QpSolver,
    ax: f64,
    v: f64,
    neighbors: &[NeighborInfo<'_>],
    cps: &[CollisionPointEstimate],
    u_prev_star: Option<&[f64]>,
    u_prev: f64,
    step: u64,
    t: f64,
) -> Result<ControlOutput, ControllerError> {
    let started = Instant::now();
    let n = cfg.horizon();
    let x0 = build_initial_condition(ax, v, cps);
    let conflicts: Vec<&CollisionPointEstimate> = cps.iter().filter(|c| c.exists).collect();
    let priority_of = |id: u8| {
        neighbors
            .iter()
            .find(|nb| nb.id == id)
            .map(|nb| nb.priority)
    };

    let higher: Vec<&CollisionPointEstimate> = conflicts
        .iter()
        .copied()
        .filter(|c| priority_of(c.neighbor_id).is_some_and(|p| p < cfg.priority))
        .collect();
    let hp_ids: Vec<u8> = higher.iter().map(|c| c.neighbor_id).collect();
    let s_c: Vec<f64> = higher.iter().map(|c| x0.s + c.signed_distance).collect();
    let (params, missing, stale) = gather_neighbor_params(neighbors, cfg.id, &hp_ids, step, n);

    let critical = CriticalRegion::around(&s_c, cfg.d_safe, cfg.d_brake);
    let hp_in_region = higher.iter().any(|c| c.rv_signed_distance >= -cfg.d_safe);
    let terminal_active = critical
        .as_ref()
        .is_some_and(|cr| terminal_constraint_active(x0.s, cr, hp_in_region));

    let docp = assemble_docp(&DocpInputs {
        model: &cfg.model,
        x0,
        u_prev,
        weights: &cfg.weights,
        limits: &cfg.limits,
        critical,
        terminal_active,
        neighbors: &params,
        s_c: &s_c,
        d_safe: cfg.d_safe,
    })?;

    let u0 = match u_prev_star {
        Some(prev) if prev.len() == n => warm_start_shift(prev),
        Some(prev) => {
            return Err(ControllerError::WarmStart {
                id: cfg.id,
                expected: n,
                got: prev.len(),
            })
        }
        None => vec![0.0; n],
    };

    let mut diagnostics = StepDiagnostics {
        terminal_active,
        critical,
        collision_rows: docp.quad_cons.len(),
        constrained_by: hp_ids,
        missing,
        stale,
        ..StepDiagnostics::default()
    };
    let u_star = match solve_penalty_ccp(&docp, &u0, &cfg.ccp, qp) {
        Ok(res) => {
            let u = res.u_star.clone();
            diagnostics.ccp = Some(res);
            u
        }
        Err(CcpError::Infeasible) => {
            diagnostics.fallback = true;
            let s_in = critical.map_or(f64::INFINITY, |cr| cr.s_in);
            fallback_brake(&x0, s_in, cfg.limits.u_min, n)
        }
        Err(e) => return Err(e.into()),
    };

    let u_apply = u_star[0];
    if u_apply < cfg.limits.u_min - INPUT_BOUND_TOL || u_apply > cfg.limits.u_max + INPUT_BOUND_TOL
    {
        return Err(ControllerError::InputBound {
            id: cfg.id,
            u: u_apply,
            u_min: cfg.limits.u_min,
            u_max: cfg.limits.u_max,
        });
    }

    let ccm_out = outgoing_ccm(cfg, &x0, &u_star, &conflicts, t);
    diagnostics.solve_seconds = started.elapsed().as_secs_f64();
    Ok(ControlOutput {
        u_apply,
        u_star,
        x0,
        ccm_out,
        diagnostics,
    })
}

/// Distances `|s_{k+j} - s_c|` for `j = 2 .. N+1`, holding the last input
/// for the extra step, addressed to every conflicting agent.
fn outgoing_ccm(
    cfg: &AgentConfig,
    x0: &AgentState,
    u_star: &[f64],
    conflicts: &[&CollisionPointEstimate],
    t: f64,
) -> CcmMessage {
    let mut u_ext = u_star.to_vec();
    u_ext.push(*u_star.last().expect("horizon >= 1"));
    let states = predict_states(&cfg.model, x0, &u_ext);
    let (minute_of_hour, ms_of_minute) = CcmMessage::timestamp_from_seconds(t);
    CcmMessage {
        minute_of_hour,
        ms_of_minute,
        ego_id: cfg.id,
        conflicts: conflicts
            .iter()
            .map(|c| {
                let s_c = x0.s + c.signed_distance;
                CcmConflict {
                    neighbor_id: c.neighbor_id,
                    d_seq: states[1..]
                        .iter()
                        .map(|x| (x.s - s_c).abs() as f32)
                        .collect(),
                }
            })
            .collect(),
    }
}

/// Stateful wrapper that owns the solver workspace and the previous
/// solution of one agent.
#[derive(Debug, Clone)]
pub struct AgentController {
    pub cfg: AgentConfig,
    qp: QpSolver,
    last_u_star: Option<Vec<f64>>,
    u_prev: f64,
}

impl AgentController {
    pub fn new(cfg: AgentConfig) -> Self {
        Self {
            cfg,
            qp: QpSolver::default(),
            last_u_star: None,
            u_prev: 0.0,
        }
    }

    pub fn step(
        &mut self,
        ax: f64,
        v: f64,
        neighbors: &[NeighborInfo<'_>],
        cps: &[CollisionPointEstimate],
        step: u64,
        t: f64,
    ) -> Result<ControlOutput, ControllerError> {
        let out = run_mpc_step(
            &self.cfg,
            &mut self.qp,
            ax,
            v,
            neighbors,
            cps,
            self.last_u_star.as_deref(),
            self.u_prev,
            step,
            t,
        )?;
        self.last_u_star = Some(out.u_star.clone());
        self.u_prev = out.u_apply;
        Ok(out)
    }
}
