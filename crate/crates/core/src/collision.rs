//! Collision-point estimation for straight-moving agents.
//!
//! Each agent's near future is approximated by a straight segment from its
//! current position along its heading. Where the segments of two agents
//! cross is their joint collision point (CP). Once an agent has driven past
//! the CP its forward segment no longer reaches it, so the start of the
//! segment is moved back to a point from the recent path history.

use serde::{Deserialize, Serialize};

use crate::localization::ManeuverPose;

pub type Point = [f64; 2];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PathSegment {
    pub p0: Point,
    pub p1: Point,
}

/// Timestamped position in the maneuver frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoseSample {
    pub t: f64,
    pub x: f64,
    pub y: f64,
}

/// What an agent knows about itself or a remote vehicle at time `t`.
#[derive(Debug, Clone, Copy)]
pub struct TrackedAgent<'a> {
    pub id: u8,
    pub pose: ManeuverPose,
    pub v: f64,
    pub t: f64,
    /// Oldest first.
    pub history: &'a [PoseSample],
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CollisionPointEstimate {
    pub exists: bool,
    pub point: Point,
    /// Ego's signed distance to the CP: positive before it, negative after.
    pub signed_distance: f64,
    /// Same quantity for the remote vehicle.
    pub rv_signed_distance: f64,
    pub neighbor_id: u8,
}

impl CollisionPointEstimate {
    pub fn none(neighbor_id: u8) -> Self {
        Self {
            exists: false,
            point: [f64::NAN, f64::NAN],
            signed_distance: f64::INFINITY,
            rv_signed_distance: f64::INFINITY,
            neighbor_id,
        }
    }
}

pub fn project_segment(pose: &ManeuverPose, v: f64, t_k: f64, t_f: f64) -> PathSegment {
    let (s, c) = pose.psi.sin_cos();
    let len = if v > 0.0 { (t_f - t_k) * v } else { 1.0 };
    PathSegment {
        p0: [pose.x, pose.y],
        p1: [pose.x + len * c, pose.y + len * s],
    }
}

fn sub(a: Point, b: Point) -> Point {
    [a[0] - b[0], a[1] - b[1]]
}

fn cross(a: Point, b: Point) -> f64 {
    a[0] * b[1] - a[1] * b[0]
}

/// Crossing point of two closed segments. Parallel and collinear pairs give
/// `None`.
pub fn segment_intersection(a: &PathSegment, b: &PathSegment) -> Option<Point> {
    let r = sub(a.p1, a.p0);
    let s = sub(b.p1, b.p0);
    let denom = cross(r, s);
    let scale = (r[0].hypot(r[1]) * s[0].hypot(s[1])).max(f64::MIN_POSITIVE);
    if denom.abs() <= 1e-12 * scale {
        return None;
    }
    let qp = sub(b.p0, a.p0);
    let t = cross(qp, s) / denom;
    let u = cross(qp, r) / denom;
    const EPS: f64 = 1e-12;
    if !(-EPS..=1.0 + EPS).contains(&t) || !(-EPS..=1.0 + EPS).contains(&u) {
        return None;
    }
    let t = t.clamp(0.0, 1.0);
    Some([a.p0[0] + t * r[0], a.p0[1] + t * r[1]])
}

/// Oldest recorded position no older than `t_h` before `t`, or the current
/// position when the history has nothing in that window.
fn history_start(agent: &TrackedAgent<'_>, t_h: f64) -> Point {
    agent
        .history
        .iter()
        .find(|p| p.t >= agent.t - t_h && p.t <= agent.t)
        .map(|p| [p.x, p.y])
        .unwrap_or([agent.pose.x, agent.pose.y])
}

fn signed_distance(pose: &ManeuverPose, cp: Point) -> f64 {
    let d = sub(cp, [pose.x, pose.y]);
    let dist = d[0].hypot(d[1]);
    let (s, c) = pose.psi.sin_cos();
    if d[0] * c + d[1] * s < 0.0 {
        -dist
    } else {
        dist
    }
}

/// Joint CP of `ego` and `rv`. `horizon` is how far ahead (s) the forward
/// segments reach; `t_h` bounds the path history used for the retries.
pub fn estimate_collision_point(
    ego: &TrackedAgent<'_>,
    rv: &TrackedAgent<'_>,
    horizon: f64,
    t_h: f64,
) -> CollisionPointEstimate {
    let ego_fwd = project_segment(&ego.pose, ego.v, ego.t, ego.t + horizon);
    let rv_fwd = project_segment(&rv.pose, rv.v, rv.t, rv.t + horizon);
    let ego_back = PathSegment {
        p0: history_start(ego, t_h),
        ..ego_fwd
    };
    let rv_back = PathSegment {
        p0: history_start(rv, t_h),
        ..rv_fwd
    };
    let ladder = [
        (&ego_fwd, &rv_fwd),
        (&ego_back, &rv_fwd),
        (&ego_fwd, &rv_back),
        (&ego_back, &rv_back),
    ];
    for (a, b) in ladder {
        if let Some(cp) = segment_intersection(a, b) {
            return CollisionPointEstimate {
                exists: true,
                point: cp,
                signed_distance: signed_distance(&ego.pose, cp),
                rv_signed_distance: signed_distance(&rv.pose, cp),
                neighbor_id: rv.id,
            };
        }
    }
    CollisionPointEstimate::none(rv.id)
}

/// Sum of two agents' unsigned distances to their joint CP.
pub fn pair_distance(d_i: f64, d_l: f64) -> f64 {
    if d_i.is_infinite() || d_l.is_infinite() {
        f64::INFINITY
    } else {
        d_i + d_l
    }
}
