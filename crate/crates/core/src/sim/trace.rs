use std::fs;
use std::io;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dynamics::AgentState;
use crate::localization::ManeuverPose;

/// One agent at one MPC step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentStepRecord {
    pub step: u64,
    pub t: f64,
    pub id: u8,
    /// Plant state; `s` is the lane coordinate.
    pub truth: AgentState,
    /// Initial condition the controller used.
    pub x0: AgentState,
    pub est_pose: ManeuverPose,
    /// EKF horizontal position error, m.
    pub pos_error: f64,
    pub u_apply: f64,
    /// Estimated signed distance to the CP with each neighbor that has one.
    pub d_tilde: Vec<(u8, f64)>,
    /// True summed distance to the joint CP with each neighbor.
    pub dist: Vec<(u8, f64)>,
    pub eps_c: f64,
    pub eps_x: f64,
    pub ccp_iters: usize,
    pub qp_iters: usize,
    pub rho_c: f64,
    pub fallback: bool,
    pub terminal_active: bool,
    pub collision_rows: usize,
    pub constrained_by: Vec<u8>,
    pub missing: Vec<u8>,
    pub stale: Vec<u8>,
    pub ccm_len: usize,
    pub ccm_sha256: String,
}

/// Plant state between MPC steps.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlantSample {
    pub t: f64,
    pub ax: f64,
    pub v: f64,
    pub s: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum MessageKind {
    Ccm,
    Cam,
}

/// A message handed to receivers at `consumed_step`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Delivery {
    pub kind: MessageKind,
    pub sender: u8,
    /// `-1` for the broadcast that precedes the first step.
    pub sent_step: i64,
    pub consumed_step: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimTrace {
    pub name: String,
    pub ts: f64,
    pub d_safe: f64,
    pub agent_ids: Vec<u8>,
    pub v_ref: Vec<f64>,
    /// `steps[k][i]` is agent `agent_ids[i]` at step `k`.
    pub steps: Vec<Vec<AgentStepRecord>>,
    /// `plant[i]` holds agent `agent_ids[i]`'s plant samples.
    pub plant: Vec<Vec<PlantSample>>,
    /// First time each agent's lane coordinate reached its CP with each
    /// neighbor, `(neighbor, t)`.
    pub crossings: Vec<Vec<(u8, f64)>>,
    pub deliveries: Vec<Delivery>,
    pub dropped: usize,
    /// Wall-clock controller time per step; not part of the exported files.
    #[serde(skip)]
    pub solve_seconds: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentSummary {
    pub id: u8,
    pub peak_decel: f64,
    pub min_speed: f64,
    pub max_speed_deviation: f64,
    pub cp_cross_time: Option<f64>,
    pub fallback_steps: usize,
    pub max_eps_c: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub scenario: String,
    pub d_safe: f64,
    pub min_dist: f64,
    pub min_dist_ok: bool,
    pub agents: Vec<AgentSummary>,
    /// Agent ids in the order they reached their first CP.
    pub passing_order: Vec<u8>,
}

impl SimTrace {
    /// Smallest true pair distance over all steps.
    pub fn min_distance(&self) -> f64 {
        self.steps
            .iter()
            .flatten()
            .flat_map(|r| r.dist.iter().map(|(_, d)| *d))
            .fold(f64::INFINITY, f64::min)
    }

    pub fn agent_index(&self, id: u8) -> Option<usize> {
        self.agent_ids.iter().position(|a| *a == id)
    }

    pub fn summary(&self) -> Summary {
        let min_dist = self.min_distance();
        let agents: Vec<AgentSummary> = self
            .agent_ids
            .iter()
            .enumerate()
            .map(|(i, &id)| {
                let plant = &self.plant[i];
                let records = self.steps.iter().map(move |s| &s[i]);
                AgentSummary {
                    id,
                    peak_decel: plant.iter().map(|p| p.ax).fold(0.0, f64::min),
                    min_speed: plant.iter().map(|p| p.v).fold(f64::INFINITY, f64::min),
                    max_speed_deviation: plant
                        .iter()
                        .map(|p| (p.v - self.v_ref[i]).abs())
                        .fold(0.0, f64::max),
                    cp_cross_time: self.crossings[i].iter().map(|(_, t)| *t).reduce(f64::min),
                    fallback_steps: records.clone().filter(|r| r.fallback).count(),
                    max_eps_c: records.map(|r| r.eps_c).fold(0.0, f64::max),
                }
            })
            .collect();
        let mut order: Vec<(f64, u8)> = agents
            .iter()
            .filter_map(|a| a.cp_cross_time.map(|t| (t, a.id)))
            .collect();
        order.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        Summary {
            scenario: self.name.clone(),
            d_safe: self.d_safe,
            min_dist,
            min_dist_ok: min_dist >= self.d_safe,
            agents,
            passing_order: order.into_iter().map(|(_, id)| id).collect(),
        }
    }
}

pub const CSV_HEADER: [&str; 20] = [
    "t",
    "s",
    "v",
    "ax",
    "u",
    "dist",
    "eps_c",
    "ccp_iters",
    "est_s",
    "est_v",
    "d_tilde",
    "eps_x",
    "qp_iters",
    "rho_c",
    "fallback",
    "terminal",
    "collision_rows",
    "pos_error",
    "ccm_len",
    "ccm_sha256",
];

fn num(x: f64) -> String {
    if x.is_infinite() {
        if x > 0.0 { "inf" } else { "-inf" }.to_string()
    } else {
        format!("{x}")
    }
}

/// Write `agent_<id>.csv` per agent and `summary.json` into `dir`.
pub fn export_trace(tr: &SimTrace, dir: &Path) -> io::Result<Summary> {
    fs::create_dir_all(dir)?;
    for (i, id) in tr.agent_ids.iter().enumerate() {
        let mut w = csv::Writer::from_path(dir.join(format!("agent_{id}.csv")))?;
        w.write_record(CSV_HEADER)?;
        for step in &tr.steps {
            let r = &step[i];
            let dist = r.dist.iter().map(|(_, d)| *d).fold(f64::INFINITY, f64::min);
            let d_tilde = r
                .d_tilde
                .iter()
                .map(|(_, d)| *d)
                .fold(f64::INFINITY, f64::min);
            w.write_record([
                num(r.t),
                num(r.truth.s),
                num(r.truth.v),
                num(r.truth.ax),
                num(r.u_apply),
                num(dist),
                num(r.eps_c),
                r.ccp_iters.to_string(),
                num(r.x0.s),
                num(r.x0.v),
                num(d_tilde),
                num(r.eps_x),
                r.qp_iters.to_string(),
                num(r.rho_c),
                u8::from(r.fallback).to_string(),
                u8::from(r.terminal_active).to_string(),
                r.collision_rows.to_string(),
                num(r.pos_error),
                r.ccm_len.to_string(),
                r.ccm_sha256.clone(),
            ])?;
        }
        w.flush()?;
    }
    let summary = tr.summary();
    fs::write(
        dir.join("summary.json"),
        serde_json::to_string_pretty(&summary).map_err(io::Error::other)? + "\n",
    )?;
    Ok(summary)
}
