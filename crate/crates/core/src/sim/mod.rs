//! Lock-step multi-agent simulation.
//!
//! Every MPC step runs in the same order for all agents: deliver the
//! messages sent in the previous step, run each controller, broadcast, then
//! integrate the plants and sample the sensors until the next step.

mod scenario;
mod trace;

pub use scenario::{
    apply_override, AgentSpec, CcpSettings, GeoOrigin, NoiseSettings, Scenario, ScenarioError,
    SimSettings,
};
pub use trace::{
    export_trace, AgentStepRecord, AgentSummary, Delivery, MessageKind, PlantSample, SimTrace,
    Summary, CSV_HEADER,
};

use nalgebra::{Matrix4, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::ccm::{decode_ccm, encode_ccm, CcmError, RvPoseRecord};
use crate::collision::{
    estimate_collision_point, CollisionPointEstimate, PoseSample, TrackedAgent,
};
use crate::controller::{AgentController, ControllerError, NeighborInfo, ReceivedCcm};
use crate::dynamics::{continuous_rhs, AgentState};
use crate::localization::{
    ekf_predict, ekf_update, gnss_noise, maneuver_to_wgs, odometry_process_noise, wgs_to_maneuver,
    EkfState, ManeuverPose, Wgs84Pose,
};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SimError {
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
    #[error("step {step}, agent {id}: {source}")]
    Controller {
        step: u64,
        id: u8,
        source: ControllerError,
    },
    #[error("agent {id}: {source}")]
    Ccm { id: u8, source: CcmError },
}

const GNSS: u64 = 0;
const ODOMETRY: u64 = 1;
const DROP: u64 = 2;

#[derive(Debug, Clone)]
struct Envelope<T> {
    sender: u8,
    sent_step: i64,
    payload: T,
}

#[derive(Debug, Clone, Copy)]
struct Odometry {
    v: f64,
    yaw_rate: f64,
}

struct AgentRuntime {
    spec: AgentSpec,
    ctl: AgentController,
    truth: AgentState,
    /// Own maneuver frame, anchored at the initial pose.
    frame: Wgs84Pose,
    ekf: EkfState,
    odo: Odometry,
    history: Vec<PoseSample>,
    /// Latest CAM and path history per other agent, in own frame.
    cams: Vec<(u8, RvPoseRecord, Vec<PoseSample>)>,
    ccms: Vec<(u8, ReceivedCcm)>,
    rng_gnss: ChaCha8Rng,
    rng_odo: ChaCha8Rng,
    rng_drop: ChaCha8Rng,
    apply_u: f64,
}

fn stream(seed: u64, agent: usize, sensor: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(agent as u64 * 8 + sensor);
    r
}

fn gauss(rng: &mut ChaCha8Rng, sigma: f64) -> f64 {
    Normal::new(0.0, sigma).map_or(0.0, |n| n.sample(rng))
}

/// World-frame pose of an agent on its lane.
fn world_pose(spec: &AgentSpec, s: f64) -> ManeuverPose {
    let p = spec.position(s);
    ManeuverPose::new(p[0], p[1], 0.0, spec.heading_deg.to_radians())
}

/// Lane coordinate of the crossing point of two lanes, seen from `a`.
fn lane_crossing(a: &AgentSpec, b: &AgentSpec) -> Option<f64> {
    let da = a.direction();
    let db = b.direction();
    let denom = da[0] * db[1] - da[1] * db[0];
    if denom.abs() < 1e-12 {
        return None;
    }
    let w = [b.cp[0] - a.cp[0], b.cp[1] - a.cp[1]];
    Some((w[0] * db[1] - w[1] * db[0]) / denom)
}

fn rk4(t_ax: f64, x: &AgentState, u: f64, h: f64) -> AgentState {
    let x0 = x.as_vector();
    let f = |x: &Vector3<f64>| continuous_rhs(t_ax, x, u);
    let k1 = f(&x0);
    let k2 = f(&(x0 + k1 * (h / 2.0)));
    let k3 = f(&(x0 + k2 * (h / 2.0)));
    let k4 = f(&(x0 + k3 * h));
    let mut next = AgentState::from_vector(&(x0 + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0)));
    next.v = next.v.max(0.0);
    next
}

/// Event times in `(0, ts]` relative to the step start: plant substeps and
/// sensor samples, merged.
fn event_offsets(sc: &Scenario) -> Vec<f64> {
    let mut t: Vec<f64> = (1..=sc.sim.substeps)
        .map(|j| sc.ts * j as f64 / sc.sim.substeps as f64)
        .collect();
    for period in [sc.sim.odometry_period, sc.sim.gnss_period] {
        let n = (sc.ts / period).round() as usize;
        t.extend((1..=n).map(|j| period * j as f64));
    }
    t.sort_by(f64::total_cmp);
    t.dedup_by(|a, b| (*a - *b).abs() < 1e-9);
    t
}

fn is_sample(offset: f64, period: f64) -> bool {
    let r = offset / period;
    (r - r.round()).abs() < 1e-6
}

fn to_sample(t: f64, pose: &ManeuverPose) -> PoseSample {
    PoseSample {
        t,
        x: pose.x,
        y: pose.y,
    }
}

fn trim_history(h: &mut Vec<PoseSample>, t: f64, window: f64) {
    let keep_from = h
        .iter()
        .position(|p| p.t >= t - window - 1e-9)
        .unwrap_or(h.len());
    h.drain(..keep_from);
}

pub fn run_scenario(sc: &Scenario) -> Result<SimTrace, SimError> {
    sc.validate()?;
    let mut roster: Vec<AgentSpec> = sc.agents.clone();
    roster.sort_by_key(|a| a.id);
    let world = sc.origin.pose();
    let noise = sc.noise;
    let gnss_r = gnss_noise(
        noise.gnss_pos,
        noise.gnss_alt,
        noise.gnss_heading_deg.to_radians(),
    );
    let priorities: Vec<(u8, u32)> = roster.iter().map(|a| (a.id, a.priority)).collect();
    let n = sc.horizon;

    let mut agents = Vec::with_capacity(roster.len());
    for (i, spec) in roster.iter().enumerate() {
        let truth = AgentState::new(spec.ax0, spec.v0, spec.s0);
        let frame = maneuver_to_wgs(&world_pose(spec, spec.s0), &world);
        let cov0 = if noise.enabled {
            gnss_r
        } else {
            Matrix4::identity() * 1e-6
        };
        agents.push(AgentRuntime {
            spec: spec.clone(),
            ctl: AgentController::new(sc.agent_config(spec)?),
            truth,
            frame,
            ekf: EkfState::new(ManeuverPose::default(), cov0),
            odo: Odometry {
                v: spec.v0,
                yaw_rate: 0.0,
            },
            history: Vec::new(),
            cams: Vec::new(),
            ccms: Vec::new(),
            rng_gnss: stream(sc.seed, i, GNSS),
            rng_odo: stream(sc.seed, i, ODOMETRY),
            rng_drop: stream(sc.seed, i, DROP),
            apply_u: 0.0,
        });
    }

    let crossing_s: Vec<Vec<(u8, Option<f64>)>> = roster
        .iter()
        .map(|a| {
            roster
                .iter()
                .filter(|b| b.id != a.id)
                .map(|b| (b.id, lane_crossing(a, b)))
                .collect()
        })
        .collect();

    let mut trace = SimTrace {
        name: sc.name.clone(),
        ts: sc.ts,
        d_safe: sc.d_safe,
        agent_ids: roster.iter().map(|a| a.id).collect(),
        v_ref: roster.iter().map(|a| a.v_ref).collect(),
        steps: Vec::new(),
        plant: roster
            .iter()
            .map(|a| {
                vec![PlantSample {
                    t: 0.0,
                    ax: a.ax0,
                    v: a.v0,
                    s: a.s0,
                }]
            })
            .collect(),
        crossings: vec![Vec::new(); roster.len()],
        deliveries: Vec::new(),
        dropped: 0,
        solve_seconds: Vec::new(),
    };

    // broadcast that precedes the first step
    let mut cam_inbox: Vec<Envelope<RvPoseRecord>> = agents
        .iter()
        .map(|a| Envelope {
            sender: a.spec.id,
            sent_step: -1,
            payload: cam_record(a, 0.0),
        })
        .collect();
    let mut ccm_inbox: Vec<Envelope<Vec<u8>>> = Vec::new();
    let offsets = event_offsets(sc);

    for k in 0..sc.steps() {
        let t = k as f64 * sc.ts;

        // (1) deliver
        for env in &cam_inbox {
            assert_eq!(env.sent_step, k as i64 - 1, "CAM consumed out of step");
            trace.deliveries.push(Delivery {
                kind: MessageKind::Cam,
                sender: env.sender,
                sent_step: env.sent_step,
                consumed_step: k,
            });
            for a in agents.iter_mut().filter(|a| a.spec.id != env.sender) {
                a.receive_cam(&env.payload, sc.sim.history);
            }
        }
        for env in &ccm_inbox {
            assert_eq!(env.sent_step, k as i64 - 1, "CCM consumed out of step");
            trace.deliveries.push(Delivery {
                kind: MessageKind::Ccm,
                sender: env.sender,
                sent_step: env.sent_step,
                consumed_step: k,
            });
            let Ok(msg) = decode_ccm(&env.payload, n) else {
                continue;
            };
            for a in agents.iter_mut().filter(|a| a.spec.id != env.sender) {
                let rec = ReceivedCcm {
                    msg: msg.clone(),
                    sent_step: env.sent_step as u64,
                };
                match a.ccms.iter_mut().find(|(id, _)| *id == env.sender) {
                    Some(slot) => slot.1 = rec,
                    None => a.ccms.push((env.sender, rec)),
                }
            }
        }

        // (2) control
        let mut next_cam = Vec::with_capacity(agents.len());
        let mut next_ccm = Vec::with_capacity(agents.len());
        let mut records = Vec::with_capacity(agents.len());
        let mut step_seconds = 0.0;
        let truths: Vec<AgentState> = agents.iter().map(|a| a.truth).collect();
        for (i, a) in agents.iter_mut().enumerate() {
            let pose = a.ekf.pose();
            a.history.push(to_sample(t, &pose));
            trim_history(&mut a.history, t, sc.sim.history);
            let cps = a.collision_points(t, sc.sim.cp_horizon, sc.sim.history);
            let neighbors: Vec<NeighborInfo<'_>> = priorities
                .iter()
                .filter(|(id, _)| *id != a.spec.id)
                .map(|&(id, priority)| NeighborInfo {
                    id,
                    priority,
                    ccm: a.ccms.iter().find(|(s, _)| *s == id).map(|(_, r)| r),
                })
                .collect();
            let out = a
                .ctl
                .step(a.truth.ax, a.odo.v, &neighbors, &cps, k, t)
                .map_err(|source| SimError::Controller {
                    step: k,
                    id: a.spec.id,
                    source,
                })?;
            step_seconds += out.diagnostics.solve_seconds;

            let bytes = encode_ccm(&out.ccm_out, n).map_err(|source| SimError::Ccm {
                id: a.spec.id,
                source,
            })?;
            let dropped = sc.drop_prob > 0.0 && a.rng_drop.random::<f64>() < sc.drop_prob;
            if dropped {
                trace.dropped += 1;
            } else {
                next_ccm.push(Envelope {
                    sender: a.spec.id,
                    sent_step: k as i64,
                    payload: bytes.clone(),
                });
            }
            next_cam.push(Envelope {
                sender: a.spec.id,
                sent_step: k as i64,
                payload: cam_record(a, t),
            });

            let truth_world = world_pose(&a.spec, a.truth.s);
            let est_world = wgs_to_maneuver(&maneuver_to_wgs(&pose, &a.frame), &world);
            let dist = crossing_s[i]
                .iter()
                .map(|&(nid, sc_i)| {
                    let j = roster.iter().position(|b| b.id == nid).expect("roster id");
                    let d = match (sc_i, crossing_s[j].iter().find(|(x, _)| *x == a.spec.id)) {
                        (Some(ci), Some(&(_, Some(cj)))) => {
                            (a.truth.s - ci).abs() + (truths[j].s - cj).abs()
                        }
                        _ => f64::INFINITY,
                    };
                    (nid, d)
                })
                .collect();
            let ccp = out.diagnostics.ccp.as_ref();
            records.push(AgentStepRecord {
                step: k,
                t,
                id: a.spec.id,
                truth: a.truth,
                x0: out.x0,
                est_pose: pose,
                pos_error: (est_world.x - truth_world.x).hypot(est_world.y - truth_world.y),
                u_apply: out.u_apply,
                d_tilde: cps
                    .iter()
                    .filter(|c| c.exists)
                    .map(|c| (c.neighbor_id, c.signed_distance))
                    .collect(),
                dist,
                eps_c: ccp.map_or(0.0, |c| c.eps_c_l1()),
                eps_x: ccp.map_or(0.0, |c| c.eps_x),
                ccp_iters: ccp.map_or(0, |c| c.iterations),
                qp_iters: ccp.map_or(0, |c| c.qp_iterations),
                rho_c: ccp.map_or(0.0, |c| c.rho_c_final),
                fallback: out.diagnostics.fallback,
                terminal_active: out.diagnostics.terminal_active,
                collision_rows: out.diagnostics.collision_rows,
                constrained_by: out.diagnostics.constrained_by.clone(),
                missing: out.diagnostics.missing.clone(),
                stale: out.diagnostics.stale.clone(),
                ccm_len: bytes.len(),
                ccm_sha256: hex::encode(Sha256::digest(&bytes)),
            });
            a.apply_u = out.u_apply;
        }
        trace.steps.push(records);
        trace.solve_seconds.push(step_seconds);
        cam_inbox = next_cam;
        ccm_inbox = next_ccm;

        // (3) plant and sensors
        for (i, a) in agents.iter_mut().enumerate() {
            let t_ax = sc.t_ax * sc.sim.plant_t_ax_scale;
            let mut prev = 0.0;
            for &off in &offsets {
                let before = a.truth;
                let start = prev;
                a.truth = rk4(t_ax, &a.truth, a.apply_u, off - start);
                prev = off;
                let now = t + off;
                trace.plant[i].push(PlantSample {
                    t: now,
                    ax: a.truth.ax,
                    v: a.truth.v,
                    s: a.truth.s,
                });
                for &(nid, ci) in &crossing_s[i] {
                    let Some(ci) = ci else { continue };
                    let seen = trace.crossings[i].iter().any(|(x, _)| *x == nid);
                    if !seen && before.s < ci && a.truth.s >= ci {
                        let frac = (ci - before.s) / (a.truth.s - before.s);
                        trace.crossings[i].push((nid, t + start + frac * (off - start)));
                    }
                }
                if is_sample(off, sc.sim.odometry_period) {
                    a.sense_odometry(&noise, sc.sim.odometry_period);
                }
                if is_sample(off, sc.sim.gnss_period) {
                    a.sense_gnss(&noise, &world, &gnss_r);
                }
            }
        }
    }
    Ok(trace)
}

fn cam_record(a: &AgentRuntime, t: f64) -> RvPoseRecord {
    RvPoseRecord {
        sender_id: a.spec.id,
        timestamp: t,
        pose: maneuver_to_wgs(&a.ekf.pose(), &a.frame),
        speed: a.odo.v,
    }
}

impl AgentRuntime {
    fn receive_cam(&mut self, rec: &RvPoseRecord, window: f64) {
        let local = wgs_to_maneuver(&rec.pose, &self.frame);
        match self.cams.iter_mut().find(|(id, _, _)| *id == rec.sender_id) {
            Some(slot) => {
                slot.1 = *rec;
                slot.2.push(to_sample(rec.timestamp, &local));
                trim_history(&mut slot.2, rec.timestamp, window);
            }
            None => self
                .cams
                .push((rec.sender_id, *rec, vec![to_sample(rec.timestamp, &local)])),
        }
    }

    fn collision_points(&self, t: f64, horizon: f64, window: f64) -> Vec<CollisionPointEstimate> {
        let ego = TrackedAgent {
            id: self.spec.id,
            pose: self.ekf.pose(),
            v: self.odo.v,
            t,
            history: &self.history,
        };
        self.cams
            .iter()
            .map(|(id, rec, hist)| {
                let rv = TrackedAgent {
                    id: *id,
                    pose: wgs_to_maneuver(&rec.pose, &self.frame),
                    v: rec.speed,
                    t: rec.timestamp,
                    history: hist,
                };
                estimate_collision_point(&ego, &rv, horizon, window)
            })
            .collect()
    }

    fn sense_odometry(&mut self, noise: &NoiseSettings, dt: f64) {
        let mut m = Odometry {
            v: self.truth.v,
            yaw_rate: 0.0,
        };
        if noise.enabled {
            m.v = (m.v + gauss(&mut self.rng_odo, noise.odo_v)).max(0.0);
            m.yaw_rate += gauss(&mut self.rng_odo, noise.odo_yaw_rate);
        }
        let v = 0.5 * (self.odo.v + m.v);
        let w = 0.5 * (self.odo.yaw_rate + m.yaw_rate);
        let q = odometry_process_noise(self.ekf.mean[3], noise.odo_v, noise.odo_yaw_rate, dt);
        self.ekf = ekf_predict(&self.ekf, v, w, dt, &q);
        self.odo = m;
    }

    fn sense_gnss(&mut self, noise: &NoiseSettings, world: &Wgs84Pose, r: &Matrix4<f64>) {
        let mut p = world_pose(&self.spec, self.truth.s);
        if noise.enabled {
            p.x += gauss(&mut self.rng_gnss, noise.gnss_pos);
            p.y += gauss(&mut self.rng_gnss, noise.gnss_pos);
            p.z += gauss(&mut self.rng_gnss, noise.gnss_alt);
            p.psi += gauss(&mut self.rng_gnss, noise.gnss_heading_deg.to_radians());
        }
        let meas = maneuver_to_wgs(&p, world);
        self.ekf = ekf_update(&self.ekf, &meas, &self.frame, r);
    }
}
