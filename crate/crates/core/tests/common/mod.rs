#![allow(dead_code)]

use dmpc::collision::{PathSegment, Point};
use dmpc::dynamics::{step, AgentModel, AgentState};
use dmpc::ocp::OcpWeights;
use dmpc::qp::QpProblem;
use nalgebra::{DMatrix, DVector};
use rand::Rng;

/// Random strictly convex QP with a known interior-or-boundary feasible point.
pub fn random_qp<R: Rng>(rng: &mut R, n: usize, m: usize) -> QpProblem {
    let g = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
    let h = &g * g.transpose() + DMatrix::identity(n, n) * 0.1;
    let f = DVector::from_fn(n, |_, _| rng.random_range(-2.0..2.0));
    let a = DMatrix::from_fn(m, n, |_, _| rng.random_range(-1.0..1.0));
    let x0 = DVector::from_fn(n, |_, _| rng.random_range(-1.0..1.0));
    let b = &a * &x0 + DVector::from_fn(m, |_, _| rng.random_range(0.0..1.0));
    QpProblem::new(h, f, a, b).unwrap()
}

/// Minimum over every subset of rows held with equality (LU on the KKT
/// system) that yields a primal-feasible point.
pub fn enumerate_qp(p: &QpProblem) -> (f64, DVector<f64>) {
    let n = p.num_vars();
    let m = p.num_constraints();
    let mut best = (f64::INFINITY, DVector::zeros(n));
    for mask in 0u32..(1 << m) {
        let rows: Vec<usize> = (0..m).filter(|i| mask & (1 << i) != 0).collect();
        if rows.len() > n {
            continue;
        }
        let k = rows.len();
        let mut kkt = DMatrix::zeros(n + k, n + k);
        let mut rhs = DVector::zeros(n + k);
        kkt.view_mut((0, 0), (n, n)).copy_from(&p.h);
        for i in 0..n {
            rhs[i] = -p.f[i];
        }
        for (r, &row) in rows.iter().enumerate() {
            for c in 0..n {
                kkt[(n + r, c)] = p.a[(row, c)];
                kkt[(c, n + r)] = p.a[(row, c)];
            }
            rhs[n + r] = p.b[row];
        }
        let Some(sol) = kkt.lu().solve(&rhs) else {
            continue;
        };
        let u = sol.rows(0, n).into_owned();
        let feasible = (0..m).all(|i| (p.a.row(i) * &u)[0] <= p.b[i] + 1e-9);
        if feasible {
            let obj = p.objective(&u);
            if obj < best.0 {
                best = (obj, u);
            }
        }
    }
    best
}

/// Tracking/comfort cost evaluated stage by stage on simulated states.
pub fn direct_cost(
    m: &AgentModel,
    x0: &AgentState,
    u: &[f64],
    u_prev: f64,
    w: &OcpWeights,
    v_ref: &[f64],
) -> f64 {
    let n = u.len();
    let mut x = *x0;
    let mut last = u_prev;
    let mut total = 0.0;
    for j in 0..n {
        total += w.r * (u[j] - last).powi(2) + w.s_w * u[j].powi(2);
        last = u[j];
        x = step(m, &x, u[j]);
        let e = v_ref[j] - x.v;
        total += if j + 1 == n { w.q_n } else { w.q } * e * e;
    }
    total
}

pub fn simulate(m: &AgentModel, x0: &AgentState, u: &[f64]) -> Vec<AgentState> {
    let mut x = *x0;
    u.iter()
        .map(|&uj| {
            x = step(m, &x, uj);
            x
        })
        .collect()
}

/// One agent of a centralized brute-force problem. The collision point is
/// at `s = 0` on every path.
pub struct GridAgent {
    pub x0: AgentState,
    pub u_prev: f64,
    pub v_ref: f64,
    pub v_max: f64,
}

pub struct GridCandidate {
    pub cost: f64,
    pub u: Vec<f64>,
    pub dist: Vec<f64>,
}

fn candidates(
    m: &AgentModel,
    a: &GridAgent,
    w: &OcpWeights,
    levels: &[f64],
    n: usize,
) -> Vec<GridCandidate> {
    let total = levels.len().pow(n as u32);
    let v_ref = vec![a.v_ref; n];
    let mut out = Vec::with_capacity(total);
    for code in 0..total {
        let mut c = code;
        let u: Vec<f64> = (0..n)
            .map(|_| {
                let l = levels[c % levels.len()];
                c /= levels.len();
                l
            })
            .collect();
        let states = simulate(m, &a.x0, &u);
        if states.iter().any(|x| x.v < 0.0 || x.v > a.v_max) {
            continue;
        }
        out.push(GridCandidate {
            cost: direct_cost(m, &a.x0, &u, a.u_prev, w, &v_ref),
            dist: states.iter().map(|x| x.s.abs()).collect(),
            u,
        });
    }
    out.sort_by(|x, y| x.cost.total_cmp(&y.cost));
    out
}

/// Minimum total cost of two agents over a per-step input grid subject to
/// `|s1_j| + |s2_j| >= d_safe` at every step. Both candidate lists are
/// sorted by cost so the search stops as soon as no pair can improve.
pub fn brute_force_pair(
    m: &AgentModel,
    agents: [&GridAgent; 2],
    w: &OcpWeights,
    levels: &[f64],
    n: usize,
    d_safe: f64,
) -> Option<(f64, Vec<f64>, Vec<f64>)> {
    let c1 = candidates(m, agents[0], w, levels, n);
    let c2 = candidates(m, agents[1], w, levels, n);
    let min1 = c1.first()?.cost;
    let mut best: Option<(f64, usize, usize)> = None;
    for (j2, b) in c2.iter().enumerate() {
        let bound = best.map_or(f64::INFINITY, |x| x.0);
        if b.cost + min1 >= bound {
            break;
        }
        for (j1, a) in c1.iter().enumerate() {
            let total = a.cost + b.cost;
            if total >= best.map_or(f64::INFINITY, |x| x.0) {
                break;
            }
            if a.dist.iter().zip(&b.dist).all(|(x, y)| x + y >= d_safe) {
                best = Some((total, j1, j2));
                break;
            }
        }
    }
    best.map(|(cost, j1, j2)| (cost, c1[j1].u.clone(), c2[j2].u.clone()))
}

pub fn point_segment_distance(p: Point, s: &PathSegment) -> f64 {
    let d = [s.p1[0] - s.p0[0], s.p1[1] - s.p0[1]];
    let l2 = d[0] * d[0] + d[1] * d[1];
    let t = if l2 == 0.0 {
        0.0
    } else {
        (((p[0] - s.p0[0]) * d[0] + (p[1] - s.p0[1]) * d[1]) / l2).clamp(0.0, 1.0)
    };
    (p[0] - s.p0[0] - t * d[0]).hypot(p[1] - s.p0[1] - t * d[1])
}

/// Closest approach of two segments by dense sampling of the first.
pub fn sampled_gap(a: &PathSegment, b: &PathSegment, samples: usize) -> f64 {
    (0..=samples)
        .map(|i| {
            let t = i as f64 / samples as f64;
            let p = [
                a.p0[0] + t * (a.p1[0] - a.p0[0]),
                a.p0[1] + t * (a.p1[1] - a.p0[1]),
            ];
            point_segment_distance(p, b)
        })
        .fold(f64::INFINITY, f64::min)
}

/// Smallest distance from any endpoint to the other segment; pairs where
/// this is tiny are touching cases the sampler cannot decide.
pub fn endpoint_gap(a: &PathSegment, b: &PathSegment) -> f64 {
    [
        point_segment_distance(a.p0, b),
        point_segment_distance(a.p1, b),
        point_segment_distance(b.p0, a),
        point_segment_distance(b.p1, a),
    ]
    .into_iter()
    .fold(f64::INFINITY, f64::min)
}
