//! Constant-velocity Kalman filter over the 10-dim state
//! [x, y, z, theta, l, w, d, vx, vy, vz]. Measurements are full boxes
//! (the first seven components); sizes and yaw evolve as random walks.

use nalgebra::{SMatrix, SVector};
use serde::{Deserialize, Serialize};

use super::TrackError;
use crate::geometry::{wrap_angle, Box3D};

pub type StateVec = SVector<f64, 10>;
pub type StateCov = SMatrix<f64, 10, 10>;

const SIZE_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct KalmanConfig {
    /// Process noise variance for pose and size entries.
    pub q_pose: f64,
    /// Process noise variance for velocity entries.
    pub q_vel: f64,
    /// Measurement noise variance, shared by all seven components.
    pub r_meas: f64,
    /// Initial variance for pose and size entries.
    pub p0_pose: f64,
    /// Initial variance for the unobserved velocities.
    pub p0_vel: f64,
}

impl Default for KalmanConfig {
    fn default() -> Self {
        Self { q_pose: 0.01, q_vel: 0.1, r_meas: 0.04, p0_pose: 1.0, p0_vel: 10.0 }
    }
}

#[derive(Debug, Clone)]
pub struct KalmanState {
    pub z: StateVec,
    pub p: StateCov,
}

impl KalmanState {
    /// New-track state: measured pose, zero velocity with inflated velocity
    /// covariance.
    pub fn from_detection(det: &Box3D, cfg: &KalmanConfig) -> Self {
        let z = StateVec::from_column_slice(&[
            det.x, det.y, det.z, det.theta, det.l, det.w, det.d, 0.0, 0.0, 0.0,
        ]);
        let mut p = StateCov::zeros();
        for i in 0..7 {
            p[(i, i)] = cfg.p0_pose;
        }
        for i in 7..10 {
            p[(i, i)] = cfg.p0_vel;
        }
        Self { z, p }
    }

    pub fn to_box(&self, cls: u32, score: f64) -> Result<Box3D, TrackError> {
        Box3D::new(
            self.z[0], self.z[1], self.z[2], self.z[4], self.z[5], self.z[6], self.z[3], cls,
            score,
        )
        .map_err(TrackError::from)
    }

    pub fn velocity(&self) -> [f64; 3] {
        [self.z[7], self.z[8], self.z[9]]
    }
}

fn transition(dt: f64) -> StateCov {
    let mut f = StateCov::identity();
    f[(0, 7)] = dt;
    f[(1, 8)] = dt;
    f[(2, 9)] = dt;
    f
}

fn process_noise(cfg: &KalmanConfig) -> StateCov {
    let mut q = StateCov::zeros();
    for i in 0..7 {
        q[(i, i)] = cfg.q_pose;
    }
    for i in 7..10 {
        q[(i, i)] = cfg.q_vel;
    }
    q
}

pub fn predict(state: &mut KalmanState, dt: f64, cfg: &KalmanConfig) -> Result<(), TrackError> {
    let f = transition(dt);
    state.z = f * state.z;
    state.z[3] = wrap_angle(state.z[3]);
    state.p = f * state.p * f.transpose() + process_noise(cfg);
    if !state.z.iter().all(|v| v.is_finite()) || !state.p.iter().all(|v| v.is_finite()) {
        return Err(TrackError::NonFiniteState);
    }
    Ok(())
}

pub fn update(state: &mut KalmanState, meas: &Box3D, cfg: &KalmanConfig) -> Result<(), TrackError> {
    let mut h = SMatrix::<f64, 7, 10>::zeros();
    for i in 0..7 {
        h[(i, i)] = 1.0;
    }
    let mut innovation = SVector::<f64, 7>::from_column_slice(&[
        meas.x - state.z[0],
        meas.y - state.z[1],
        meas.z - state.z[2],
        wrap_angle(meas.theta - state.z[3]),
        meas.l - state.z[4],
        meas.w - state.z[5],
        meas.d - state.z[6],
    ]);
    innovation[3] = wrap_angle(innovation[3]);
    let r = SMatrix::<f64, 7, 7>::identity() * cfg.r_meas;
    let s = h * state.p * h.transpose() + r;
    let s_inv = s.cholesky().ok_or(TrackError::SingularInnovation)?.inverse();
    let k = state.p * h.transpose() * s_inv;
    state.z += k * innovation;
    state.z[3] = wrap_angle(state.z[3]);
    for i in 4..7 {
        state.z[i] = state.z[i].max(SIZE_FLOOR);
    }
    // Joseph form keeps the covariance symmetric positive semi-definite.
    let ikh = StateCov::identity() - k * h;
    state.p = ikh * state.p * ikh.transpose() + k * r * k.transpose();
    state.p = (state.p + state.p.transpose()) * 0.5;
    if !state.z.iter().all(|v| v.is_finite()) || !state.p.iter().all(|v| v.is_finite()) {
        return Err(TrackError::NonFiniteState);
    }
    Ok(())
}
