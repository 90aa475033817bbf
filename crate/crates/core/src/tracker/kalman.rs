//! Constant-velocity Kalman filter over `(cx, cy, aspect, height)`.

use nalgebra::{SMatrix, SVector};

use crate::geometry::Box2D;

pub type StateVec = SVector<f64, 8>;
pub type StateCov = SMatrix<f64, 8, 8>;
type MeasVec = SVector<f64, 4>;
type MeasCov = SMatrix<f64, 4, 4>;

#[derive(Debug, Clone, PartialEq)]
pub struct KalmanState {
    /// `(cx, cy, aspect, height, vcx, vcy, vaspect, vheight)`, velocities in
    /// pixels per frame.
    pub mean: StateVec,
    pub covariance: StateCov,
}

impl KalmanState {
    pub fn height(&self) -> f64 {
        self.mean[3]
    }

    /// Raw `[x1, y1, x2, y2]` of the mean; may be degenerate for a bad state.
    pub fn corners(&self) -> [f64; 4] {
        let (cx, cy, a, h) = (self.mean[0], self.mean[1], self.mean[2], self.mean[3]);
        let w = a * h;
        [cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0]
    }
}

/// Noise model, with process and measurement deviations proportional to the
/// box height.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KalmanFilter {
    pub std_weight_position: f64,
    pub std_weight_velocity: f64,
    /// Multiplies every measurement standard deviation. Zero gives an exact
    /// measurement.
    pub measurement_scale: f64,
}

impl Default for KalmanFilter {
    fn default() -> Self {
        Self {
            std_weight_position: 1.0 / 20.0,
            std_weight_velocity: 1.0 / 160.0,
            measurement_scale: 1.0,
        }
    }
}

const MIN_HEIGHT: f64 = 1e-3;

impl KalmanFilter {
    pub fn initiate(&self, b: &Box2D) -> KalmanState {
        let [cx, cy, a, h] = b.to_xyah();
        let mut mean = StateVec::zeros();
        mean[0] = cx;
        mean[1] = cy;
        mean[2] = a;
        mean[3] = h;
        let p = self.std_weight_position;
        let v = self.std_weight_velocity;
        let std = [
            2.0 * p * h,
            2.0 * p * h,
            1e-2,
            2.0 * p * h,
            10.0 * v * h,
            10.0 * v * h,
            1e-5,
            10.0 * v * h,
        ];
        let covariance =
            StateCov::from_diagonal(&StateVec::from_iterator(std.iter().map(|s| s * s)));
        KalmanState { mean, covariance }
    }

    fn transition() -> StateCov {
        let mut f = StateCov::identity();
        for i in 0..4 {
            f[(i, i + 4)] = 1.0;
        }
        f
    }

    fn observation() -> SMatrix<f64, 4, 8> {
        let mut h = SMatrix::<f64, 4, 8>::zeros();
        for i in 0..4 {
            h[(i, i)] = 1.0;
        }
        h
    }

    pub fn process_noise(&self, height: f64) -> StateCov {
        let h = height.max(MIN_HEIGHT);
        let p = self.std_weight_position * h;
        let v = self.std_weight_velocity * h;
        let std = [p, p, 1e-2, p, v, v, 1e-5, v];
        StateCov::from_diagonal(&StateVec::from_iterator(std.iter().map(|s| s * s)))
    }

    pub fn measurement_noise(&self, height: f64) -> MeasCov {
        let h = height.max(MIN_HEIGHT);
        let s = self.measurement_scale;
        let p = self.std_weight_position * h * s;
        let std = [p, p, 1e-1 * s, p];
        MeasCov::from_diagonal(&MeasVec::from_iterator(std.iter().map(|x| x * x)))
    }

    /// Propagates one frame forward.
    pub fn predict(&self, s: &KalmanState) -> KalmanState {
        let f = Self::transition();
        let mean = f * s.mean;
        let covariance = f * s.covariance * f.transpose() + self.process_noise(s.height());
        KalmanState {
            mean,
            covariance: symmetrize(covariance),
        }
    }

    /// Corrects the state with an observed box (Joseph-form covariance).
    pub fn update(&self, s: &KalmanState, obs: &Box2D) -> KalmanState {
        let h = Self::observation();
        let z = MeasVec::from_column_slice(&obs.to_xyah());
        let r = self.measurement_noise(s.height());
        let projected = h * s.mean;
        let innovation_cov = h * s.covariance * h.transpose() + r;
        let Some(inv) = innovation_cov.try_inverse() else {
            return s.clone();
        };
        let gain = s.covariance * h.transpose() * inv;
        let mut mean = s.mean + gain * (z - projected);
        mean[3] = mean[3].max(MIN_HEIGHT);
        let i_kh = StateCov::identity() - gain * h;
        let covariance = i_kh * s.covariance * i_kh.transpose() + gain * r * gain.transpose();
        KalmanState {
            mean,
            covariance: symmetrize(covariance),
        }
    }
}

fn symmetrize(m: StateCov) -> StateCov {
    (m + m.transpose()) * 0.5
}
