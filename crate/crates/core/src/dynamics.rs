//! Longitudinal agent model: a first-order drivetrain lag feeding a double
//! integrator, its exact zero-order-hold discretization, and state prediction.
//!
//! The continuous model is
//!
//! ```text
//!   d/dt [a_x]   [-1/T  0  0] [a_x]   [1/T]
//!        [ v ] = [  1   0  0] [ v ] + [ 0 ] u
//!        [ s ]   [  0   1  0] [ s ]   [ 0 ]
//! ```
//!
//! where `T` is the drivetrain time constant and `u` the reference
//! acceleration. Because the system matrix is lower block-triangular, the
//! matrix exponential has a closed form in terms of `e^{-ts/T}` only.

use nalgebra::{DMatrix, DVector, Matrix3, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ModelError {
    #[error("{name} must be positive and finite, got {value}")]
    NonPositive { name: &'static str, value: f64 },
}

/// Longitudinal state `(a_x, v, s)`. `s` is the signed path coordinate,
/// zero at the nearest collision point.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct AgentState {
    pub ax: f64,
    pub v: f64,
    pub s: f64,
}

impl AgentState {
    pub fn new(ax: f64, v: f64, s: f64) -> Self {
        Self { ax, v, s }
    }

    pub fn as_vector(&self) -> Vector3<f64> {
        Vector3::new(self.ax, self.v, self.s)
    }

    pub fn from_vector(x: &Vector3<f64>) -> Self {
        Self::new(x[0], x[1], x[2])
    }

    pub fn is_finite(&self) -> bool {
        self.ax.is_finite() && self.v.is_finite() && self.s.is_finite()
    }
}

/// Discrete-time agent model for a fixed drivetrain time constant and sample
/// time.
#[derive(Debug, Clone, PartialEq)]
pub struct AgentModel {
    t_ax: f64,
    ts: f64,
    a_d: Matrix3<f64>,
    b_d: Vector3<f64>,
}

impl AgentModel {
    pub fn t_ax(&self) -> f64 {
        self.t_ax
    }

    pub fn ts(&self) -> f64 {
        self.ts
    }

    pub fn a_d(&self) -> &Matrix3<f64> {
        &self.a_d
    }

    pub fn b_d(&self) -> &Vector3<f64> {
        &self.b_d
    }

    /// Continuous-time system matrix.
    pub fn a_continuous(&self) -> Matrix3<f64> {
        continuous_matrices(self.t_ax).0
    }

    /// Continuous-time input matrix.
    pub fn b_continuous(&self) -> Vector3<f64> {
        continuous_matrices(self.t_ax).1
    }
}

/// Continuous system and input matrices for drivetrain time constant `t_ax`.
pub fn continuous_matrices(t_ax: f64) -> (Matrix3<f64>, Vector3<f64>) {
    let a = Matrix3::new(
        -1.0 / t_ax,
        0.0,
        0.0, //
        1.0,
        0.0,
        0.0, //
        0.0,
        1.0,
        0.0,
    );
    let b = Vector3::new(1.0 / t_ax, 0.0, 0.0);
    (a, b)
}

/// Right-hand side of the continuous model, used by the plant integrator.
pub fn continuous_rhs(t_ax: f64, x: &Vector3<f64>, u: f64) -> Vector3<f64> {
    Vector3::new((u - x[0]) / t_ax, x[0], x[1])
}

/// `(g1, g2, g3)` with `g1 = 1 - e^{-a}`, `g2 = a - g1`, `g3 = a^2/2 - a + g1`.
///
/// `g2` and `g3` cancel catastrophically for small `a`; below the cutoff they
/// are summed from their Taylor series instead.
fn lag_integrals(a: f64) -> (f64, f64, f64) {
    let g1 = -(-a).exp_m1();
    if a > 0.1 {
        return (g1, a - g1, 0.5 * a * a - a + g1);
    }
    // g2 = sum_{k>=2} (-1)^k a^k / k!,  g3 = sum_{k>=3} (-1)^(k+1) a^k / k!
    let mut term = a * a / 2.0;
    let mut g2: f64 = 0.0;
    let mut g3 = 0.0;
    let mut k = 2.0;
    let mut sign = 1.0;
    while term.abs() > f64::EPSILON * 1e-3 * (g2.abs() + f64::MIN_POSITIVE) && k < 40.0 {
        g2 += sign * term;
        k += 1.0;
        term *= a / k;
        g3 += sign * term;
        sign = -sign;
    }
    (g1, g2, g3)
}

/// Exact zero-order-hold discretization of the lag + double-integrator model.
pub fn discretize_zoh(t_ax: f64, ts: f64) -> Result<AgentModel, ModelError> {
    if !(t_ax > 0.0 && t_ax.is_finite()) {
        return Err(ModelError::NonPositive {
            name: "drivetrain time constant",
            value: t_ax,
        });
    }
    if !(ts > 0.0 && ts.is_finite()) {
        return Err(ModelError::NonPositive {
            name: "sample time",
            value: ts,
        });
    }
    let alpha = ts / t_ax;
    let decay = (-alpha).exp();
    let (g1, g2, g3) = lag_integrals(alpha);
    let a_d = Matrix3::new(
        decay,
        0.0,
        0.0, //
        t_ax * g1,
        1.0,
        0.0, //
        t_ax * t_ax * g2,
        ts,
        1.0,
    );
    let b_d = Vector3::new(g1, t_ax * g2, t_ax * t_ax * g3);
    Ok(AgentModel { t_ax, ts, a_d, b_d })
}

/// One discrete step `x+ = A_d x + B_d u`.
pub fn step(model: &AgentModel, x: &AgentState, u: f64) -> AgentState {
    AgentState::from_vector(&(model.a_d * x.as_vector() + model.b_d * u))
}

/// Predicted states `x_{k+1|k} .. x_{k+N|k}` from the condensed (stacked)
/// form of the dynamics.
pub fn predict_states(model: &AgentModel, x0: &AgentState, u_seq: &[f64]) -> Vec<AgentState> {
    let cond = CondensedPrediction::new(model, x0, u_seq.len());
    let u = DVector::from_column_slice(u_seq);
    let ax = cond.accel.apply(&u);
    let v = cond.speed.apply(&u);
    let s = cond.position.apply(&u);
    (0..u_seq.len())
        .map(|j| AgentState::new(ax[j], v[j], s[j]))
        .collect()
}

/// Affine map `u -> M u + c` giving one state component over the horizon.
#[derive(Debug, Clone, PartialEq)]
pub struct AffineMap {
    pub matrix: DMatrix<f64>,
    pub offset: DVector<f64>,
}

impl AffineMap {
    pub fn apply(&self, u: &DVector<f64>) -> DVector<f64> {
        &self.matrix * u + &self.offset
    }

    /// Component at prediction step `j` (1-based, `1..=N`) as `(row, offset)`.
    pub fn row(&self, j: usize) -> (DVector<f64>, f64) {
        (self.matrix.row(j - 1).transpose(), self.offset[j - 1])
    }
}

/// Stacked prediction `x_{k+j|k} = A^j x_k + sum_i A^{j-1-i} B u_{k+i}`,
/// split per state component. Row `j-1` of each map is step `k+j`.
#[derive(Debug, Clone, PartialEq)]
pub struct CondensedPrediction {
    pub accel: AffineMap,
    pub speed: AffineMap,
    pub position: AffineMap,
}

impl CondensedPrediction {
    pub fn new(model: &AgentModel, x0: &AgentState, n: usize) -> Self {
        // impulse[m] = A^m B
        let mut impulse = Vec::with_capacity(n);
        let mut ab = model.b_d;
        for _ in 0..n {
            impulse.push(ab);
            ab = model.a_d * ab;
        }
        let mut free = model.a_d * x0.as_vector();
        let mut maps: [AffineMap; 3] = std::array::from_fn(|_| AffineMap {
            matrix: DMatrix::zeros(n, n),
            offset: DVector::zeros(n),
        });
        for j in 0..n {
            for (c, map) in maps.iter_mut().enumerate() {
                map.offset[j] = free[c];
                for i in 0..=j {
                    map.matrix[(j, i)] = impulse[j - i][c];
                }
            }
            free = model.a_d * free;
        }
        let [accel, speed, position] = maps;
        Self {
            accel,
            speed,
            position,
        }
    }

    pub fn horizon(&self) -> usize {
        self.speed.offset.len()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    /// Classic RK4 over one sample with the input held.
    fn rk4_oracle(t_ax: f64, ts: f64, x: Vector3<f64>, u: f64, substeps: usize) -> Vector3<f64> {
        let h = ts / substeps as f64;
        let mut x = x;
        for _ in 0..substeps {
            let k1 = continuous_rhs(t_ax, &x, u);
            let k2 = continuous_rhs(t_ax, &(x + k1 * (h / 2.0)), u);
            let k3 = continuous_rhs(t_ax, &(x + k2 * (h / 2.0)), u);
            let k4 = continuous_rhs(t_ax, &(x + k3 * h), u);
            x += (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0);
        }
        x
    }

    #[test]
    fn rejects_bad_parameters() {
        assert!(discretize_zoh(0.0, 0.2).is_err());
        assert!(discretize_zoh(-0.4, 0.2).is_err());
        assert!(discretize_zoh(0.4, 0.0).is_err());
        assert!(discretize_zoh(f64::NAN, 0.2).is_err());
        // fast drivetrain is fine
        assert!(discretize_zoh(0.05, 0.2).is_ok());
    }

    #[test]
    fn accel_decay_entry() {
        let m = discretize_zoh(0.4, 0.2).unwrap();
        assert_abs_diff_eq!(m.a_d()[(0, 0)], (-0.5f64).exp(), epsilon = 1e-15);
        assert_abs_diff_eq!(m.a_d()[(0, 0)], 0.60653, epsilon = 1e-5);
    }

    #[test]
    fn vanishing_sample_time() {
        let m = discretize_zoh(0.4, 1e-12).unwrap();
        assert_abs_diff_eq!(*m.a_d(), Matrix3::identity(), epsilon = 1e-10);
        assert_abs_diff_eq!(*m.b_d(), Vector3::zeros(), epsilon = 1e-10);
    }

    #[test]
    fn zoh_matches_rk4() {
        for &(t_ax, ts) in &[(0.4, 0.2), (0.1, 0.2), (1.3, 0.05), (0.02, 0.2), (2.0, 1.0)] {
            let m = discretize_zoh(t_ax, ts).unwrap();
            for c in 0..3 {
                let mut e = Vector3::zeros();
                e[c] = 1.0;
                let col = rk4_oracle(t_ax, ts, e, 0.0, 10_000);
                assert_abs_diff_eq!(m.a_d().column(c).into_owned(), col, epsilon = 1e-9);
            }
            let b = rk4_oracle(t_ax, ts, Vector3::zeros(), 1.0, 10_000);
            assert_abs_diff_eq!(*m.b_d(), b, epsilon = 1e-9);
        }
    }

    #[test]
    fn series_branch_is_continuous() {
        // both sides of the Taylor cutoff agree
        let lo = lag_integrals(0.1 - 1e-13);
        let hi = lag_integrals(0.1 + 1e-13);
        assert_abs_diff_eq!(lo.1, hi.1, epsilon = 1e-13);
        assert_abs_diff_eq!(lo.2, hi.2, epsilon = 1e-13);
    }

    #[test]
    fn one_step_against_rk4() {
        let m = discretize_zoh(0.4, 0.2).unwrap();
        let x = AgentState::new(1.0, 10.0, 0.0);
        let got = step(&m, &x, 1.0).as_vector();
        let want = rk4_oracle(0.4, 0.2, x.as_vector(), 1.0, 10_000);
        assert_abs_diff_eq!(got, want, epsilon = 1e-9);
    }

    #[test]
    fn coasting() {
        let m = discretize_zoh(0.4, 0.2).unwrap();
        let x = step(&m, &AgentState::new(0.0, 7.5, -3.0), 0.0);
        assert_eq!(x.ax, 0.0);
        assert_eq!(x.v, 7.5);
        assert_abs_diff_eq!(x.s, -3.0 + 7.5 * 0.2, epsilon = 1e-14);
    }

    #[test]
    fn lag_settles_to_command() {
        let m = discretize_zoh(0.4, 0.2).unwrap();
        let mut x = AgentState::new(0.0, 0.0, 0.0);
        for _ in 0..400 {
            x = step(&m, &x, -1.7);
        }
        assert_abs_diff_eq!(x.ax, -1.7, epsilon = 1e-12);
    }

    #[test]
    fn predict_single_step() {
        let m = discretize_zoh(0.4, 0.2).unwrap();
        let x0 = AgentState::new(0.3, 9.0, -40.0);
        let p = predict_states(&m, &x0, &[1.2]);
        assert_eq!(p.len(), 1);
        assert_eq!(p[0], step(&m, &x0, 1.2));
    }

    #[test]
    fn predict_zero_input() {
        let m = discretize_zoh(0.4, 0.2).unwrap();
        let p = predict_states(&m, &AgentState::new(0.0, 10.0, 0.0), &[0.0; 20]);
        for (j, x) in p.iter().enumerate() {
            assert_abs_diff_eq!(x.v, 10.0, epsilon = 1e-12);
            assert_abs_diff_eq!(x.s, 10.0 * 0.2 * (j + 1) as f64, epsilon = 1e-11);
        }
    }
}
