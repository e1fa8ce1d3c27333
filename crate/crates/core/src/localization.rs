//! GNSS/odometry fusion in a local maneuver frame.
//!
//! The maneuver frame is a flat-earth tangent plane anchored at an origin
//! pose: `+x` points along the origin heading, `+y` to its left, `+z` up.
//! Headings in this frame are counter-clockwise from `+x`; geodetic headings
//! are clockwise from North. Valid within roughly 2 km of the origin.

use std::f64::consts::PI;

use nalgebra::{Matrix4, Vector4};
use serde::{Deserialize, Serialize};

const WGS84_A: f64 = 6_378_137.0;
const WGS84_F: f64 = 1.0 / 298.257_223_563;

/// Wrap an angle to `(-pi, pi]`.
pub fn wrap_angle(a: f64) -> f64 {
    let w = a.rem_euclid(2.0 * PI);
    if w > PI {
        w - 2.0 * PI
    } else {
        w
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Wgs84Pose {
    /// Latitude, rad.
    pub lat: f64,
    /// Longitude, rad.
    pub lon: f64,
    /// Ellipsoidal height, m.
    pub alt: f64,
    /// Heading, rad, clockwise from North.
    pub heading: f64,
}

impl Wgs84Pose {
    pub fn is_valid(&self) -> bool {
        self.lat.abs() <= PI / 2.0
            && self.lon > -PI
            && self.lon <= PI
            && self.alt.is_finite()
            && self.heading.is_finite()
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct ManeuverPose {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub psi: f64,
}

impl ManeuverPose {
    pub fn new(x: f64, y: f64, z: f64, psi: f64) -> Self {
        Self { x, y, z, psi }
    }

    pub fn as_vector(&self) -> Vector4<f64> {
        Vector4::new(self.x, self.y, self.z, self.psi)
    }

    pub fn from_vector(v: &Vector4<f64>) -> Self {
        Self::new(v[0], v[1], v[2], v[3])
    }

    pub fn position(&self) -> [f64; 2] {
        [self.x, self.y]
    }
}

/// Meridian and prime-vertical radii of curvature at latitude `lat`.
fn radii(lat: f64) -> (f64, f64) {
    let e2 = WGS84_F * (2.0 - WGS84_F);
    let w = 1.0 - e2 * lat.sin().powi(2);
    let n = WGS84_A / w.sqrt();
    let m = WGS84_A * (1.0 - e2) / (w * w.sqrt());
    (m, n)
}

pub fn wgs_to_maneuver(p: &Wgs84Pose, origin: &Wgs84Pose) -> ManeuverPose {
    let (m, n) = radii(origin.lat);
    let north = (p.lat - origin.lat) * (m + origin.alt);
    let east = wrap_angle(p.lon - origin.lon) * (n + origin.alt) * origin.lat.cos();
    let (s, c) = origin.heading.sin_cos();
    ManeuverPose {
        x: east * s + north * c,
        y: -east * c + north * s,
        z: p.alt - origin.alt,
        psi: wrap_angle(origin.heading - p.heading),
    }
}

pub fn maneuver_to_wgs(p: &ManeuverPose, origin: &Wgs84Pose) -> Wgs84Pose {
    let (m, n) = radii(origin.lat);
    let (s, c) = origin.heading.sin_cos();
    let east = s * p.x - c * p.y;
    let north = c * p.x + s * p.y;
    Wgs84Pose {
        lat: origin.lat + north / (m + origin.alt),
        lon: wrap_angle(origin.lon + east / ((n + origin.alt) * origin.lat.cos())),
        alt: origin.alt + p.z,
        heading: wrap_angle(origin.heading - p.psi),
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EkfState {
    pub mean: Vector4<f64>,
    pub cov: Matrix4<f64>,
}

impl EkfState {
    pub fn new(pose: ManeuverPose, cov: Matrix4<f64>) -> Self {
        Self {
            mean: pose.as_vector(),
            cov,
        }
    }

    pub fn pose(&self) -> ManeuverPose {
        ManeuverPose::from_vector(&self.mean)
    }
}

/// Process noise over `dt` induced by white odometry errors in speed and
/// yaw rate.
pub fn odometry_process_noise(
    psi: f64,
    sigma_v: f64,
    sigma_yaw_rate: f64,
    dt: f64,
) -> Matrix4<f64> {
    let (s, c) = psi.sin_cos();
    let qv = (sigma_v * dt).powi(2);
    let qw = (sigma_yaw_rate * dt).powi(2);
    let mut q = Matrix4::zeros();
    q[(0, 0)] = c * c * qv;
    q[(0, 1)] = c * s * qv;
    q[(1, 0)] = c * s * qv;
    q[(1, 1)] = s * s * qv;
    q[(3, 3)] = qw;
    // keep the altitude channel observable-but-bounded
    q[(2, 2)] = 1e-6 * dt;
    q
}

/// GNSS noise expressed in the maneuver frame (horizontal noise isotropic).
pub fn gnss_noise(sigma_pos: f64, sigma_alt: f64, sigma_heading: f64) -> Matrix4<f64> {
    Matrix4::from_diagonal(&Vector4::new(
        sigma_pos * sigma_pos,
        sigma_pos * sigma_pos,
        sigma_alt * sigma_alt,
        sigma_heading * sigma_heading,
    ))
}

fn symmetrize(p: &Matrix4<f64>) -> Matrix4<f64> {
    (p + p.transpose()) * 0.5
}

/// Midpoint (RK2) propagation of the constant-velocity model.
pub fn ekf_predict(
    state: &EkfState,
    v: f64,
    yaw_rate: f64,
    dt: f64,
    process_noise: &Matrix4<f64>,
) -> EkfState {
    let x = &state.mean;
    let psi_mid = x[3] + 0.5 * dt * yaw_rate;
    let (s, c) = psi_mid.sin_cos();
    let mean = Vector4::new(
        x[0] + dt * v * c,
        x[1] + dt * v * s,
        x[2],
        wrap_angle(x[3] + dt * yaw_rate),
    );
    let mut f = Matrix4::identity();
    f[(0, 3)] = -dt * v * s;
    f[(1, 3)] = dt * v * c;
    EkfState {
        mean,
        cov: symmetrize(&(f * state.cov * f.transpose() + process_noise)),
    }
}

/// Correct with a GNSS pose. The measurement is mapped into the maneuver
/// frame first, so the observation model is the identity.
pub fn ekf_update(
    state: &EkfState,
    meas: &Wgs84Pose,
    origin: &Wgs84Pose,
    meas_noise: &Matrix4<f64>,
) -> EkfState {
    let z = wgs_to_maneuver(meas, origin).as_vector();
    let mut innov = z - state.mean;
    innov[3] = wrap_angle(innov[3]);
    let s = state.cov + meas_noise;
    let Some(s_inv) = s.try_inverse() else {
        return *state;
    };
    let k = state.cov * s_inv;
    let mut mean = state.mean + k * innov;
    mean[3] = wrap_angle(mean[3]);
    let i_k = Matrix4::identity() - k;
    let cov = i_k * state.cov * i_k.transpose() + k * meas_noise * k.transpose();
    EkfState {
        mean,
        cov: symmetrize(&cov),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use nalgebra::SymmetricEigen;

    fn origin() -> Wgs84Pose {
        Wgs84Pose {
            lat: 48.78_f64.to_radians(),
            lon: 9.18_f64.to_radians(),
            alt: 250.0,
            heading: 0.0,
        }
    }

    /// Meridian arc length between two latitudes by Simpson quadrature.
    fn meridian_arc(lat0: f64, lat1: f64, h: f64) -> f64 {
        let n = 200;
        let step = (lat1 - lat0) / n as f64;
        let m = |phi: f64| radii(phi).0 + h;
        let mut acc = m(lat0) + m(lat1);
        for i in 1..n {
            let w = if i % 2 == 1 { 4.0 } else { 2.0 };
            acc += w * m(lat0 + step * i as f64);
        }
        acc * step / 3.0
    }

    #[test]
    fn origin_maps_to_zero() {
        let o = origin();
        let p = wgs_to_maneuver(&o, &o);
        assert_eq!(p, ManeuverPose::default());
    }

    #[test]
    fn hundred_metres_north() {
        let o = origin();
        // solve arc(lat0, lat) = 100 by Newton
        let mut lat = o.lat + 100.0 / 6.37e6;
        for _ in 0..10 {
            let err = meridian_arc(o.lat, lat, o.alt) - 100.0;
            lat -= err / (radii(lat).0 + o.alt);
        }
        let p = Wgs84Pose { lat, ..o };
        let m = wgs_to_maneuver(&p, &o);
        assert_abs_diff_eq!(m.x, 100.0, epsilon = 0.01);
        assert_abs_diff_eq!(m.y, 0.0, epsilon = 0.01);
        // with the origin facing East the same point is to the left
        let east = Wgs84Pose {
            heading: PI / 2.0,
            ..o
        };
        let m = wgs_to_maneuver(&p, &east);
        assert_abs_diff_eq!(m.x, 0.0, epsilon = 0.01);
        assert_abs_diff_eq!(m.y, 100.0, epsilon = 0.01);
    }

    #[test]
    fn roundtrip() {
        let o = Wgs84Pose {
            heading: 0.7,
            ..origin()
        };
        for &(x, y, psi) in &[
            (0.0, 0.0, 0.0),
            (1500.0, -900.0, 3.0),
            (-1999.0, 10.0, -3.1),
            (123.4, 1777.0, 1.0),
        ] {
            let m = ManeuverPose::new(x, y, 4.0, psi);
            let w = maneuver_to_wgs(&m, &o);
            let back = wgs_to_maneuver(&w, &o);
            assert_abs_diff_eq!(back.x, x, epsilon = 1e-6);
            assert_abs_diff_eq!(back.y, y, epsilon = 1e-6);
            assert_abs_diff_eq!(back.psi, psi, epsilon = 1e-12);
            let w2 = maneuver_to_wgs(&back, &o);
            assert!((w2.lat - w.lat).abs() <= 1e-9 && (w2.lon - w.lon).abs() <= 1e-9);
        }
    }

    #[test]
    fn heading_convention() {
        let o = Wgs84Pose {
            heading: PI / 2.0,
            ..origin()
        };
        // heading North seen from an East-facing frame is +90 degrees (left)
        let p = Wgs84Pose { heading: 0.0, ..o };
        assert_abs_diff_eq!(wgs_to_maneuver(&p, &o).psi, PI / 2.0, epsilon = 1e-12);
    }

    #[test]
    fn wrap() {
        assert_abs_diff_eq!(wrap_angle(3.0 * PI), PI, epsilon = 1e-12);
        assert_abs_diff_eq!(wrap_angle(-PI), PI, epsilon = 1e-12);
        assert_abs_diff_eq!(wrap_angle(0.5 + 4.0 * PI), 0.5, epsilon = 1e-12);
    }

    #[test]
    fn predict_at_rest() {
        let q = Matrix4::identity() * 0.01;
        let s = EkfState::new(ManeuverPose::new(1.0, 2.0, 3.0, 0.4), Matrix4::identity());
        let p = ekf_predict(&s, 0.0, 0.0, 0.05, &q);
        assert_eq!(p.mean, s.mean);
        assert_abs_diff_eq!(p.cov, s.cov + q, epsilon = 1e-15);
    }

    #[test]
    fn predict_straight() {
        let s = EkfState::new(ManeuverPose::default(), Matrix4::zeros());
        let p = ekf_predict(&s, 10.0, 0.0, 0.05, &Matrix4::zeros());
        assert_abs_diff_eq!(p.mean[0], 0.5, epsilon = 1e-6);
    }

    #[test]
    fn predict_circle() {
        let mut s = EkfState::new(ManeuverPose::default(), Matrix4::zeros());
        let dt = 1e-3;
        let steps = (2.0 * PI / 0.5 / dt).round() as usize;
        let rem = 2.0 * PI / 0.5 - steps as f64 * dt;
        for _ in 0..steps {
            s = ekf_predict(&s, 10.0, 0.5, dt, &Matrix4::zeros());
        }
        if rem > 0.0 {
            s = ekf_predict(&s, 10.0, 0.5, rem, &Matrix4::zeros());
        }
        assert!(s.mean[0].hypot(s.mean[1]) <= 1e-3);
    }

    #[test]
    fn update_with_exact_measurement() {
        let o = origin();
        let pose = ManeuverPose::new(10.0, -5.0, 0.0, 0.3);
        let s = EkfState::new(pose, Matrix4::identity() * 4.0);
        let meas = maneuver_to_wgs(&pose, &o);
        let u = ekf_update(&s, &meas, &o, &gnss_noise(1.5, 3.0, 0.035));
        assert_abs_diff_eq!(u.mean, s.mean, epsilon = 1e-7);
        for i in 0..4 {
            assert!(u.cov[(i, i)] < s.cov[(i, i)]);
        }
    }

    #[test]
    fn heading_innovation_wraps() {
        let o = origin();
        let pose = ManeuverPose::new(0.0, 0.0, 0.0, 3.1);
        let s = EkfState::new(pose, Matrix4::identity());
        let mut meas = maneuver_to_wgs(&pose, &o);
        meas.heading -= 2.0 * PI;
        let u = ekf_update(&s, &meas, &o, &gnss_noise(1.0, 1.0, 0.1));
        assert_abs_diff_eq!(u.mean[3], 3.1, epsilon = 1e-9);
    }

    #[test]
    fn noise_free_tracking() {
        // 30 s curved run, predict at 20 Hz, update at 5 Hz
        let o = origin();
        let truth = |t: f64| {
            let (v, w) = (8.0, 0.05);
            let psi = w * t;
            ManeuverPose::new(v / w * psi.sin(), v / w * (1.0 - psi.cos()), 0.0, psi)
        };
        let mut s = EkfState::new(ManeuverPose::default(), Matrix4::identity() * 1e-4);
        let q = odometry_process_noise(0.0, 0.1, 0.01, 0.05);
        let r = gnss_noise(1.5, 3.0, 0.035);
        for k in 1..=600 {
            s = ekf_predict(&s, 8.0, 0.05, 0.05, &q);
            if k % 4 == 0 {
                let m = maneuver_to_wgs(&truth(k as f64 * 0.05), &o);
                s = ekf_update(&s, &m, &o, &r);
            }
            let eig = SymmetricEigen::new(s.cov);
            assert!(eig.eigenvalues.min() >= -1e-10);
        }
        let t = truth(30.0);
        assert!((s.mean[0] - t.x).hypot(s.mean[1] - t.y) <= 1e-3);
    }
}
