//! Detection-to-track association.
//!
//! Every track carries a constant-velocity Kalman filter on its centroid.
//! The cost of pairing track `i` with detection `j` is the Mahalanobis norm,
//! under the track's predicted covariance, of the state correction that the
//! detection would cause. Costs go through Kuhn-Munkres; matched pairs whose
//! cost exceeds the gate are dropped and the detection spawns a new track.

mod hungarian;

use nalgebra::{Matrix3, Matrix6, Vector3, Vector6};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Point3;

pub use hungarian::solve_square;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AssociationConfig {
    /// Gate ε on the Mahalanobis cost.
    pub gate_epsilon: f64,
    /// Tracks without a match for longer than this are dropped (seconds).
    pub track_timeout_s: f64,
    /// Initial velocity standard deviation of a new track (m/s).
    pub init_velocity_sigma: f64,
    /// Variance of a detection centroid as a position measurement (m²).
    pub centroid_measurement_var: f64,
    /// Spectral density of the centroid's white-noise acceleration (m²/s³).
    pub centroid_accel_var: f64,
}

impl Default for AssociationConfig {
    fn default() -> Self {
        AssociationConfig {
            gate_epsilon: 1.0,
            track_timeout_s: 2.0,
            init_velocity_sigma: 1.0,
            centroid_measurement_var: 0.01,
            centroid_accel_var: 1.0,
        }
    }
}

impl AssociationConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("association.gate_epsilon", self.gate_epsilon),
            ("association.track_timeout_s", self.track_timeout_s),
            ("association.init_velocity_sigma", self.init_velocity_sigma),
            ("association.centroid_measurement_var", self.centroid_measurement_var),
            ("association.centroid_accel_var", self.centroid_accel_var),
        ];
        for (key, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{key} must be positive, got {v}")));
            }
        }
        Ok(())
    }
}

/// Constant-velocity transition over `dt` seconds.
pub fn cv_transition(dt: f64) -> Matrix6<f64> {
    let mut f = Matrix6::identity();
    f.fixed_view_mut::<3, 3>(0, 3).copy_from(&(Matrix3::identity() * dt));
    f
}

/// Process noise of continuous white-noise acceleration integrated over `dt`.
/// Composes exactly: Q(a+b) = F(b) Q(a) F(b)ᵀ + Q(b).
pub fn cv_process_noise(dt: f64, accel_var: f64) -> Matrix6<f64> {
    let i = Matrix3::identity();
    let mut q = Matrix6::zeros();
    q.fixed_view_mut::<3, 3>(0, 0).copy_from(&(i * (dt.powi(3) / 3.0)));
    q.fixed_view_mut::<3, 3>(0, 3).copy_from(&(i * (dt.powi(2) / 2.0)));
    q.fixed_view_mut::<3, 3>(3, 0).copy_from(&(i * (dt.powi(2) / 2.0)));
    q.fixed_view_mut::<3, 3>(3, 3).copy_from(&(i * dt));
    q * accel_var
}

/// `xᵀ Σ⁻¹ x` through a Cholesky solve.
pub fn mahalanobis(x: &Vector6<f64>, sigma: &Matrix6<f64>) -> Result<f64> {
    let chol = sigma.cholesky().ok_or(Error::DegenerateCovariance)?;
    Ok(x.dot(&chol.solve(x)))
}

#[derive(Debug, Clone, PartialEq)]
pub struct CentroidFilter {
    /// Centroid position (m) followed by velocity (m/s).
    pub state: Vector6<f64>,
    pub covariance: Matrix6<f64>,
    pub last_update: f64,
}

/// Predicted centroid state and covariance at a query time.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CentroidPrediction {
    pub state: Vector6<f64>,
    pub covariance: Matrix6<f64>,
}

impl CentroidFilter {
    /// Zero-velocity start at `centroid`.
    pub fn new(centroid: Point3, t: f64, cfg: &AssociationConfig) -> Self {
        let mut covariance = Matrix6::zeros();
        for k in 0..3 {
            covariance[(k, k)] = cfg.centroid_measurement_var;
            covariance[(k + 3, k + 3)] = cfg.init_velocity_sigma.powi(2);
        }
        CentroidFilter {
            state: Vector6::new(centroid.x, centroid.y, centroid.z, 0.0, 0.0, 0.0),
            covariance,
            last_update: t,
        }
    }

    pub fn position(&self) -> Point3 {
        self.state.fixed_rows::<3>(0).into_owned()
    }

    pub fn velocity(&self) -> Vector3<f64> {
        self.state.fixed_rows::<3>(3).into_owned()
    }

    /// Prediction at `t` without touching the filter. Query times earlier
    /// than the last update are clamped to zero elapsed time.
    pub fn predict(&self, t: f64, accel_var: f64) -> CentroidPrediction {
        let dt = (t - self.last_update).max(0.0);
        if dt == 0.0 {
            return CentroidPrediction {
                state: self.state,
                covariance: self.covariance,
            };
        }
        let f = cv_transition(dt);
        let covariance = f * self.covariance * f.transpose() + cv_process_noise(dt, accel_var);
        CentroidPrediction {
            state: f * self.state,
            covariance: symmetrize(&covariance),
        }
    }

    /// Posterior of a position measurement applied on top of a prediction.
    fn correct(
        prior: &CentroidPrediction,
        measurement: &Point3,
        measurement_var: f64,
    ) -> Result<CentroidPrediction> {
        let p = &prior.covariance;
        let s = p.fixed_view::<3, 3>(0, 0) + Matrix3::identity() * measurement_var;
        let s_inv = s.try_inverse().ok_or(Error::DegenerateCovariance)?;
        // K = P Hᵀ S⁻¹ with H = [I 0].
        let gain = p.fixed_view::<6, 3>(0, 0) * s_inv;
        let innovation = measurement - prior.state.fixed_rows::<3>(0);
        let state = prior.state + gain * innovation;
        // Joseph form keeps the covariance symmetric positive-definite.
        let mut i_kh = Matrix6::identity();
        {
            let mut block = i_kh.fixed_view_mut::<6, 3>(0, 0);
            block -= gain;
        }
        let covariance = i_kh * p * i_kh.transpose()
            + gain * (Matrix3::identity() * measurement_var) * gain.transpose();
        Ok(CentroidPrediction {
            state,
            covariance: symmetrize(&covariance),
        })
    }

    /// Mahalanobis cost of associating a detection centroid at time `t`:
    /// z̃ = z_hyp − ẑ, weighted by the predicted covariance.
    pub fn association_cost(
        &self,
        detection_centroid: &Point3,
        t: f64,
        cfg: &AssociationConfig,
    ) -> Result<f64> {
        let prior = self.predict(t, cfg.centroid_accel_var);
        let hypothetical = Self::correct(&prior, detection_centroid, cfg.centroid_measurement_var)?;
        let correction = hypothetical.state - prior.state;
        mahalanobis(&correction, &prior.covariance)
    }

    /// Standard measurement update; `last_update` becomes `t` unless `t` is
    /// stale.
    pub fn update(&mut self, detection_centroid: &Point3, t: f64, cfg: &AssociationConfig) -> Result<()> {
        self.update_with_variance(detection_centroid, t, cfg.centroid_accel_var, cfg.centroid_measurement_var)
    }

    pub fn update_with_variance(
        &mut self,
        detection_centroid: &Point3,
        t: f64,
        accel_var: f64,
        measurement_var: f64,
    ) -> Result<()> {
        let prior = self.predict(t, accel_var);
        let post = Self::correct(&prior, detection_centroid, measurement_var)?;
        self.state = post.state;
        self.covariance = post.covariance;
        self.last_update = self.last_update.max(t);
        Ok(())
    }
}

pub(crate) fn symmetrize(m: &Matrix6<f64>) -> Matrix6<f64> {
    (m + m.transpose()) * 0.5
}

/// Dense |tracks| × |detections| cost matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct CostMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl CostMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Config(format!(
                "cost matrix data has {} entries, expected {}",
                data.len(),
                rows * cols
            )));
        }
        if let Some(bad) = data.iter().find(|c| !(c.is_finite() && **c >= 0.0)) {
            return Err(Error::Config(format!("cost entries must be finite and non-negative, got {bad}")));
        }
        Ok(CostMatrix { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|row| row.len() != c) {
            return Err(Error::Config("ragged cost matrix".into()));
        }
        Self::new(r, c, rows.concat())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.cols + col]
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Assignment {
    /// (track index, detection index), sorted by track index.
    pub pairs: Vec<(usize, usize)>,
    pub unmatched_detections: Vec<usize>,
    pub unmatched_tracks: Vec<usize>,
}

impl Assignment {
    pub fn total_cost(&self, costs: &CostMatrix) -> f64 {
        self.pairs.iter().map(|&(r, c)| costs.get(r, c)).sum()
    }
}

/// Optimal track↔detection matching followed by the ε gate.
pub fn solve_assignment(costs: &CostMatrix, gate: f64) -> Assignment {
    let (rows, cols) = (costs.rows, costs.cols);
    let n = rows.max(cols);
    let max_cost = costs.data.iter().copied().fold(0.0f64, f64::max);
    // Padding entries are uniform, so they shift every complete matching by
    // the same amount. They are dropped by index below; a sentinel scaled to
    // the gate would swamp the dual potentials when ε is large.
    let sentinel = max_cost + 1.0;
    let mut square = vec![sentinel; n * n];
    for r in 0..rows {
        for c in 0..cols {
            square[r * n + c] = costs.get(r, c);
        }
    }
    let matching = solve_square(n, &square);

    let mut out = Assignment::default();
    let mut detection_used = vec![false; cols];
    let mut track_used = vec![false; rows];
    for (r, &c) in matching.iter().enumerate().take(rows) {
        if c < cols && costs.get(r, c) <= gate {
            out.pairs.push((r, c));
            detection_used[c] = true;
            track_used[r] = true;
        }
    }
    out.unmatched_detections = (0..cols).filter(|&c| !detection_used[c]).collect();
    out.unmatched_tracks = (0..rows).filter(|&r| !track_used[r]).collect();
    out
}
