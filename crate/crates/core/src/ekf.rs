//! Extended Kalman filter with constant turn rate and velocity (CTRV) dynamics,
//! used as a physics baseline.

use nalgebra::{Matrix3, Matrix5, SMatrix, Vector3, Vector5};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::wrap_angle;
use crate::intent::{CandidateSet, IntentDistribution};
use crate::traj::{ModalPrediction, ModalPredictionSet, State};

/// Turn rates below this are integrated as straight motion.
const OMEGA_EPS: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EkfConfig {
    /// Measurement noise of x and y, meters.
    pub pos_std: f64,
    /// Measurement noise of the heading, radians.
    pub heading_std: f64,
    /// Longitudinal acceleration noise, m/s².
    pub accel_std: f64,
    /// Yaw acceleration noise, rad/s².
    pub yaw_accel_std: f64,
    /// Initial standard deviations of speed and turn rate.
    pub init_speed_std: f64,
    pub init_turn_std: f64,
}

impl Default for EkfConfig {
    fn default() -> Self {
        Self { pos_std: 0.05, heading_std: 0.01, accel_std: 0.5, yaw_accel_std: 0.2, init_speed_std: 2.0, init_turn_std: 0.5 }
    }
}

/// `[x, y, ψ, v, ω]` with covariance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EkfState {
    pub mean: Vector5<f64>,
    pub cov: Matrix5<f64>,
    /// An innovation covariance had to be regularized before inversion.
    pub regularized: bool,
}

impl EkfState {
    pub fn pose(&self) -> State {
        [self.mean[0], self.mean[1], self.mean[2]]
    }

    pub fn speed(&self) -> f64 {
        self.mean[3]
    }

    pub fn turn_rate(&self) -> f64 {
        self.mean[4]
    }
}

/// Exact CTRV motion over `dt`.
pub fn ctrv_step(s: &Vector5<f64>, dt: f64) -> Vector5<f64> {
    let (x, y, psi, v, w) = (s[0], s[1], s[2], s[3], s[4]);
    let (nx, ny) = if w.abs() < OMEGA_EPS {
        (x + v * dt * psi.cos(), y + v * dt * psi.sin())
    } else {
        let r = v / w;
        (x + r * ((psi + w * dt).sin() - psi.sin()), y + r * (psi.cos() - (psi + w * dt).cos()))
    };
    Vector5::new(nx, ny, wrap_angle(psi + w * dt), v, w)
}

fn ctrv_jacobian(s: &Vector5<f64>, dt: f64) -> Matrix5<f64> {
    let (psi, v, w) = (s[2], s[3], s[4]);
    let mut f = Matrix5::identity();
    f[(2, 4)] = dt;
    if w.abs() < OMEGA_EPS {
        let (c, sn) = (psi.cos(), psi.sin());
        f[(0, 2)] = -v * dt * sn;
        f[(0, 3)] = dt * c;
        f[(0, 4)] = -0.5 * v * dt * dt * sn;
        f[(1, 2)] = v * dt * c;
        f[(1, 3)] = dt * sn;
        f[(1, 4)] = 0.5 * v * dt * dt * c;
    } else {
        let p1 = psi + w * dt;
        let (s0, c0, s1, c1) = (psi.sin(), psi.cos(), p1.sin(), p1.cos());
        f[(0, 2)] = v / w * (c1 - c0);
        f[(0, 3)] = (s1 - s0) / w;
        f[(0, 4)] = v * dt * c1 / w - v * (s1 - s0) / (w * w);
        f[(1, 2)] = v / w * (s1 - s0);
        f[(1, 3)] = (c0 - c1) / w;
        f[(1, 4)] = v * dt * s1 / w - v * (c0 - c1) / (w * w);
    }
    f
}

fn process_noise(s: &Vector5<f64>, dt: f64, cfg: &EkfConfig) -> Matrix5<f64> {
    let psi = s[2];
    let h = 0.5 * dt * dt;
    let g = SMatrix::<f64, 5, 2>::new(h * psi.cos(), 0.0, h * psi.sin(), 0.0, 0.0, h, dt, 0.0, 0.0, dt);
    let q = nalgebra::Matrix2::new(cfg.accel_std.powi(2), 0.0, 0.0, cfg.yaw_accel_std.powi(2));
    g * q * g.transpose()
}

/// Speed and turn rate of the CTRV arc through two poses `dt` apart.
fn initial_motion(a: &State, b: &State, dt: f64) -> (f64, f64) {
    let dpsi = wrap_angle(b[2] - a[2]);
    let w = dpsi / dt;
    let (dx, dy) = (b[0] - a[0], b[1] - a[1]);
    let chord = dx.hypot(dy);
    let half = 0.5 * dpsi;
    let arc = if half.abs() < 1e-9 { chord } else { chord * half / half.sin() };
    // Negative speed when the displacement points against the mean heading (reversing).
    let mid = a[2] + half;
    let sign = if dx * mid.cos() + dy * mid.sin() < 0.0 { -1.0 } else { 1.0 };
    (sign * arc / dt, w)
}

/// Filters a history of `(x, y, ψ)` measurements `dt` apart, oldest first.
pub fn ekf_filter(history: &[State], dt: f64, cfg: &EkfConfig) -> Result<EkfState> {
    if history.len() < 2 {
        return Err(Error::InsufficientHistory { needed: 2, found: history.len() });
    }
    if !(dt > 0.0) {
        return Err(Error::InvalidConfig(format!("time step must be positive, got {dt}")));
    }
    let (v, w) = initial_motion(&history[0], &history[1], dt);
    let z1 = history[1];
    let mut state = EkfState {
        mean: Vector5::new(z1[0], z1[1], wrap_angle(z1[2]), v, w),
        cov: Matrix5::from_diagonal(&Vector5::new(
            cfg.pos_std.powi(2),
            cfg.pos_std.powi(2),
            cfg.heading_std.powi(2),
            cfg.init_speed_std.powi(2),
            cfg.init_turn_std.powi(2),
        )),
        regularized: false,
    };
    let r = Matrix3::from_diagonal(&Vector3::new(cfg.pos_std.powi(2), cfg.pos_std.powi(2), cfg.heading_std.powi(2)));
    let h: SMatrix<f64, 3, 5> = SMatrix::identity();
    for z in &history[2..] {
        let f = ctrv_jacobian(&state.mean, dt);
        state.mean = ctrv_step(&state.mean, dt);
        state.cov = f * state.cov * f.transpose() + process_noise(&state.mean, dt, cfg);

        let innov = Vector3::new(z[0] - state.mean[0], z[1] - state.mean[1], wrap_angle(z[2] - state.mean[2]));
        let s = h * state.cov * h.transpose() + r;
        let s_inv = match s.try_inverse() {
            Some(inv) => inv,
            None => {
                state.regularized = true;
                (s + Matrix3::identity() * 1e-9).try_inverse().ok_or_else(|| Error::InvalidInput("innovation covariance is singular".into()))?
            }
        };
        let k = state.cov * h.transpose() * s_inv;
        state.mean += k * innov;
        state.mean[2] = wrap_angle(state.mean[2]);
        let i_kh = Matrix5::identity() - k * h;
        // Joseph form keeps the covariance symmetric positive semidefinite.
        state.cov = i_kh * state.cov * i_kh.transpose() + k * r * k.transpose();
    }
    Ok(state)
}

/// Propagates the filtered state `n_pred` steps without measurements.
pub fn ekf_predict_horizon(state: &EkfState, n_pred: usize, dt: f64) -> Vec<State> {
    let mut s = state.mean;
    (0..n_pred)
        .map(|_| {
            s = ctrv_step(&s, dt);
            [s[0], s[1], s[2]]
        })
        .collect()
}

/// Filter then predict; the result as a single mode with probability 1.
pub fn ekf_prediction(history: &[State], dt: f64, n_pred: usize, cfg: &EkfConfig) -> Result<ModalPredictionSet> {
    let state = ekf_filter(history, dt, cfg)?;
    Ok(ModalPredictionSet {
        modes: vec![ModalPrediction { probability: 1.0, intent_index: None, intent: None, states: ekf_predict_horizon(&state, n_pred, dt) }],
    })
}

/// Smoothing distance of the endpoint heuristic, meters.
pub const ENDPOINT_EPS: f64 = 0.5;

/// Heuristic intent distribution from a predicted endpoint: probability inversely
/// proportional to `distance + ENDPOINT_EPS` from the endpoint to each candidate.
pub fn endpoint_intent_distribution(endpoint: [f64; 2], candidates: &CandidateSet) -> Result<IntentDistribution> {
    if candidates.is_empty() {
        return Err(Error::EmptyCandidates);
    }
    let w = |c: &crate::intent::IntentCandidate| 1.0 / ((c.eta.x - endpoint[0]).hypot(c.eta.y - endpoint[1]) + ENDPOINT_EPS);
    let ws: Vec<f64> = candidates.spots.iter().map(w).collect();
    let wd: Vec<f64> = candidates.lanes.iter().map(w).collect();
    let total: f64 = ws.iter().chain(&wd).sum();
    Ok(IntentDistribution {
        p_s: ws.iter().map(|v| v / total).collect(),
        p_d: wd.iter().map(|v| v / total).collect(),
        candidates: candidates.clone(),
        uniform_fallback: false,
        bypass_redistributed: false,
    })
}
