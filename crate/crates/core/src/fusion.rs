//! Joint-level Kalman fusion.
//!
//! A track's state stacks position and velocity for all fifteen joints. The
//! transition, noise coupling and measurement matrices are all block
//! diagonal per joint, so the 90-dimensional filter is run as fifteen
//! independent 6-dimensional filters with identical results.
//!
//! Measurement variance adapts twice per joint: first to the detector's
//! confidence (σ²_r / c, with low-confidence joints replaced by the
//! prediction), then to the size of the jump from the previous estimate
//! relative to a sliding-window threshold.

use std::collections::VecDeque;

use nalgebra::{Matrix3, Matrix6, SMatrix, Vector3, Vector6};
use serde::{Deserialize, Serialize};

use crate::association::symmetrize;
use crate::error::{Error, Result};
use crate::ingest::{JointObservation, SkeletonDetection};
use crate::model::{JointId, Point3, SkeletonPose, NUM_JOINTS};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FusionConfig {
    /// Process noise variance σ²_q of the white acceleration per step.
    pub sigma_q2: f64,
    /// Base measurement noise variance σ²_r (m²).
    pub sigma_r2: f64,
    /// Static recording to estimate `sigma_r2` from, overriding it.
    pub calibrate_from: Option<String>,
    /// Base sampling period Δt (s).
    pub dt: f64,
    /// Joints with confidence below this are replaced by the prediction.
    pub confidence_floor: f64,
    /// Number N of jump distances kept per joint.
    pub outlier_window: usize,
    /// Multiplier w applied to the largest stored jump.
    pub outlier_multiplier: f64,
    /// o_max: consecutive inflated updates before one is force-accepted.
    pub outlier_max_consecutive: u32,
    /// Inflation factor used when the threshold is zero.
    pub max_inflation: f64,
    /// Initial velocity standard deviation of a new track's joints (m/s).
    pub init_velocity_sigma: f64,
    #[serde(skip)]
    pub confidence_feedback: bool,
    #[serde(skip)]
    pub outlier_filtering: bool,
}

impl Default for FusionConfig {
    fn default() -> Self {
        FusionConfig {
            sigma_q2: 30.0,
            sigma_r2: 4e-4,
            calibrate_from: None,
            dt: 0.033,
            confidence_floor: 0.5,
            outlier_window: 15,
            outlier_multiplier: 1.25,
            outlier_max_consecutive: 2,
            max_inflation: 100.0,
            init_velocity_sigma: 1.0,
            confidence_feedback: true,
            outlier_filtering: true,
        }
    }
}

impl FusionConfig {
    pub fn validate(&self) -> Result<()> {
        for (key, v) in [
            ("fusion.sigma_q2", self.sigma_q2),
            ("fusion.sigma_r2", self.sigma_r2),
            ("fusion.dt", self.dt),
            ("fusion.max_inflation", self.max_inflation),
            ("fusion.init_velocity_sigma", self.init_velocity_sigma),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{key} must be positive, got {v}")));
            }
        }
        if !(0.0..=1.0).contains(&self.confidence_floor) {
            return Err(Error::Config("fusion.confidence_floor must lie in [0, 1]".into()));
        }
        if self.outlier_window == 0 {
            return Err(Error::Config("fusion.outlier_window must be at least 1".into()));
        }
        if !(self.outlier_multiplier >= 1.0) {
            return Err(Error::Config("fusion.outlier_multiplier must be >= 1".into()));
        }
        Ok(())
    }

    pub fn transition(&self) -> Matrix6<f64> {
        crate::association::cv_transition(self.dt)
    }

    /// σ²_q G Gᵀ with G = [Δt²/2 I; Δt I].
    pub fn process_noise(&self) -> Matrix6<f64> {
        let g = coupling(self.dt);
        g * g.transpose() * self.sigma_q2
    }
}

fn coupling(dt: f64) -> SMatrix<f64, 6, 3> {
    let mut g = SMatrix::<f64, 6, 3>::zeros();
    g.fixed_view_mut::<3, 3>(0, 0).copy_from(&(Matrix3::identity() * (dt * dt / 2.0)));
    g.fixed_view_mut::<3, 3>(3, 0).copy_from(&(Matrix3::identity() * dt));
    g
}

/// Position and velocity of one joint.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct JointFilter {
    pub state: Vector6<f64>,
    pub covariance: Matrix6<f64>,
}

impl JointFilter {
    pub fn new(position: Point3, position_var: f64, velocity_var: f64) -> Self {
        let mut covariance = Matrix6::zeros();
        for k in 0..3 {
            covariance[(k, k)] = position_var;
            covariance[(k + 3, k + 3)] = velocity_var;
        }
        JointFilter {
            state: Vector6::new(position.x, position.y, position.z, 0.0, 0.0, 0.0),
            covariance,
        }
    }

    #[inline]
    pub fn position(&self) -> Point3 {
        self.state.fixed_rows::<3>(0).into_owned()
    }

    #[inline]
    pub fn velocity(&self) -> Vector3<f64> {
        self.state.fixed_rows::<3>(3).into_owned()
    }

    pub fn predict_steps(&mut self, steps: u32, f: &Matrix6<f64>, q: &Matrix6<f64>) {
        for _ in 0..steps {
            self.state = f * self.state;
            self.covariance = symmetrize(&(f * self.covariance * f.transpose() + q));
        }
    }

    /// Position measurement with isotropic variance, Joseph-form covariance.
    pub fn update(&mut self, z: &Point3, variance: f64) {
        let p = self.covariance;
        let s = p.fixed_view::<3, 3>(0, 0) + Matrix3::identity() * variance;
        let s_inv = s
            .try_inverse()
            .expect("innovation covariance of an SPD prior is invertible");
        let gain = p.fixed_view::<6, 3>(0, 0) * s_inv;
        self.state += gain * (z - self.position());
        let mut i_kh = Matrix6::identity();
        {
            let mut block = i_kh.fixed_view_mut::<6, 3>(0, 0);
            block -= gain;
        }
        self.covariance = symmetrize(
            &(i_kh * p * i_kh.transpose() + gain * gain.transpose() * variance),
        );
    }
}

/// σ²_rc = σ²_r / c.
pub fn measurement_variance(confidence: f64, cfg: &FusionConfig) -> Result<f64> {
    if !(confidence > 0.0) {
        return Err(Error::ConfidenceUnderflow(confidence));
    }
    Ok(cfg.sigma_r2 / confidence)
}

/// Measurement actually fed to one joint's filter.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EffectiveMeasurement {
    pub position: Point3,
    pub variance: f64,
    /// The prediction stood in for a rejected or missing observation.
    pub substituted: bool,
}

/// Confidence gate: observations at or above the floor pass with
/// confidence-scaled variance, the rest (and absent joints) are replaced by
/// the prediction at nominal variance.
pub fn gate_confidence(
    obs: Option<&JointObservation>,
    predicted: &Point3,
    cfg: &FusionConfig,
) -> EffectiveMeasurement {
    let substitute = EffectiveMeasurement {
        position: *predicted,
        variance: cfg.sigma_r2,
        substituted: true,
    };
    match obs {
        None => substitute,
        Some(o) if !cfg.confidence_feedback => EffectiveMeasurement {
            position: o.position,
            variance: cfg.sigma_r2,
            substituted: false,
        },
        Some(o) if o.confidence < cfg.confidence_floor || o.confidence <= 0.0 => substitute,
        Some(o) => EffectiveMeasurement {
            position: o.position,
            variance: measurement_variance(o.confidence, cfg).expect("confidence checked positive"),
            substituted: false,
        },
    }
}

/// th = w · max(history); +∞ while the history is empty.
pub fn outlier_threshold<'a>(history: impl IntoIterator<Item = &'a f64>, multiplier: f64) -> f64 {
    history
        .into_iter()
        .copied()
        .reduce(f64::max)
        .map_or(f64::INFINITY, |m| multiplier * m)
}

/// σ²_ro = σ²_rc / (th / d). A zero threshold inflates by `max_inflation`.
pub fn inflate_variance(distance: f64, threshold: f64, variance: f64, max_inflation: f64) -> f64 {
    if threshold <= 0.0 {
        variance * max_inflation
    } else {
        variance / (threshold / distance)
    }
}

/// Sliding-window jump monitor of one joint.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct OutlierMonitor {
    history: VecDeque<f64>,
    consecutive: u32,
    /// Posterior position after the previous update.
    reference: Option<Point3>,
}

impl OutlierMonitor {
    pub fn history(&self) -> impl Iterator<Item = &f64> {
        self.history.iter()
    }

    pub fn history_len(&self) -> usize {
        self.history.len()
    }

    pub fn consecutive_outliers(&self) -> u32 {
        self.consecutive
    }

    pub fn threshold(&self, cfg: &FusionConfig) -> f64 {
        outlier_threshold(&self.history, cfg.outlier_multiplier)
    }

    fn push(&mut self, distance: f64, window: usize) {
        if self.history.len() == window {
            self.history.pop_front();
        }
        self.history.push_back(distance);
    }
}

/// How one joint's measurement was treated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum JointStatus {
    /// Observation used at its confidence-scaled variance.
    Accepted,
    /// Prediction substituted for a missing or low-confidence observation.
    Substituted,
    /// Flagged as an outlier; variance inflated.
    Inflated,
    /// Flagged, but accepted after o_max consecutive outliers.
    ForcedAccepted,
}

impl JointStatus {
    pub fn as_char(self) -> char {
        match self {
            JointStatus::Accepted => 'A',
            JointStatus::Substituted => 'S',
            JointStatus::Inflated => 'I',
            JointStatus::ForcedAccepted => 'F',
        }
    }

    pub fn from_char(c: char) -> Option<Self> {
        Some(match c {
            'A' => JointStatus::Accepted,
            'S' => JointStatus::Substituted,
            'I' => JointStatus::Inflated,
            'F' => JointStatus::ForcedAccepted,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UpdateReport {
    pub status: [JointStatus; NUM_JOINTS],
    /// Jump distance d_{m,t}, when the joint had a previous estimate and a
    /// real observation.
    pub distance: [Option<f64>; NUM_JOINTS],
    pub threshold: [f64; NUM_JOINTS],
    pub variance: [f64; NUM_JOINTS],
}

impl UpdateReport {
    /// No joint was substituted or inflated.
    pub fn is_clean(&self) -> bool {
        self.status
            .iter()
            .all(|s| matches!(s, JointStatus::Accepted | JointStatus::ForcedAccepted))
    }
}

/// Joint filters and outlier machinery of one track.
#[derive(Debug, Clone, PartialEq)]
pub struct TrackState {
    pub track_id: u64,
    pub joints: [JointFilter; NUM_JOINTS],
    pub monitors: [OutlierMonitor; NUM_JOINTS],
    /// Timestamp of the latest applied detection.
    pub last_update: f64,
    /// Time the filter state refers to; advances in whole Δt steps.
    pub clock: f64,
}

impl TrackState {
    /// New track at the detection's joints with zero velocity. Joints the
    /// detection lacks (or rejects for low confidence) start at its centroid
    /// with a wide position prior.
    pub fn from_detection(track_id: u64, detection: &SkeletonDetection, cfg: &FusionConfig) -> Result<Self> {
        let centroid = detection.centroid()?;
        let velocity_var = cfg.init_velocity_sigma.powi(2);
        let mut monitors: [OutlierMonitor; NUM_JOINTS] = Default::default();
        let joints = std::array::from_fn(|m| {
            let gated = gate_confidence(detection.joints[m].as_ref(), &centroid, cfg);
            if gated.substituted {
                JointFilter::new(centroid, UNOBSERVED_POSITION_VAR, velocity_var)
            } else {
                monitors[m].reference = Some(gated.position);
                JointFilter::new(gated.position, cfg.sigma_r2, velocity_var)
            }
        });
        Ok(TrackState {
            track_id,
            joints,
            monitors,
            last_update: detection.timestamp,
            clock: detection.timestamp,
        })
    }

    pub fn pose(&self) -> SkeletonPose {
        SkeletonPose {
            joints: std::array::from_fn(|m| Some(self.joints[m].position())),
        }
    }

    pub fn joint(&self, joint: JointId) -> &JointFilter {
        &self.joints[joint.index()]
    }

    /// Propagates every joint n = round((t − clock)/Δt) steps, n ≥ 0. The
    /// clock advances by nΔt so sub-period gaps accumulate rather than vanish.
    pub fn predict(&mut self, t: f64, cfg: &FusionConfig) -> u32 {
        let steps = prediction_steps(t - self.clock, cfg.dt);
        if steps > 0 {
            let f = cfg.transition();
            let q = cfg.process_noise();
            for joint in &mut self.joints {
                joint.predict_steps(steps, &f, &q);
            }
            self.clock += steps as f64 * cfg.dt;
        }
        steps
    }

    /// Measurement update with confidence gating and outlier inflation.
    /// Call [`TrackState::predict`] first.
    pub fn update(&mut self, detection: &SkeletonDetection, cfg: &FusionConfig) -> UpdateReport {
        let mut report = UpdateReport {
            status: [JointStatus::Accepted; NUM_JOINTS],
            distance: [None; NUM_JOINTS],
            threshold: [f64::INFINITY; NUM_JOINTS],
            variance: [cfg.sigma_r2; NUM_JOINTS],
        };
        for m in 0..NUM_JOINTS {
            let filter = &mut self.joints[m];
            let monitor = &mut self.monitors[m];
            let predicted = filter.position();
            let gated = gate_confidence(detection.joints[m].as_ref(), &predicted, cfg);
            let mut variance = gated.variance;
            let status = if gated.substituted {
                JointStatus::Substituted
            } else if let Some(reference) = monitor.reference {
                let d = (gated.position - reference).norm();
                let th = monitor.threshold(cfg);
                report.distance[m] = Some(d);
                report.threshold[m] = th;
                if cfg.outlier_filtering && d > th {
                    if monitor.consecutive < cfg.outlier_max_consecutive {
                        monitor.consecutive += 1;
                        variance = inflate_variance(d, th, variance, cfg.max_inflation);
                        JointStatus::Inflated
                    } else {
                        monitor.consecutive = 0;
                        monitor.push(d, cfg.outlier_window);
                        JointStatus::ForcedAccepted
                    }
                } else {
                    monitor.consecutive = 0;
                    monitor.push(d, cfg.outlier_window);
                    JointStatus::Accepted
                }
            } else {
                JointStatus::Accepted
            };
            filter.update(&gated.position, variance);
            if status != JointStatus::Substituted || monitor.reference.is_some() {
                monitor.reference = Some(filter.position());
            }
            report.status[m] = status;
            report.variance[m] = variance;
        }
        self.last_update = self.last_update.max(detection.timestamp);
        report
    }

    /// Applies explicit per-joint measurements, bypassing gating.
    pub fn apply_measurements(&mut self, measurements: &[(Point3, f64); NUM_JOINTS]) {
        for (filter, (z, var)) in self.joints.iter_mut().zip(measurements) {
            filter.update(z, *var);
        }
    }
}

/// Position variance of a joint the first detection did not provide.
const UNOBSERVED_POSITION_VAR: f64 = 1.0;

/// n = round(gap/Δt), clamped at zero.
pub fn prediction_steps(gap: f64, dt: f64) -> u32 {
    if !(gap > 0.0) {
        return 0;
    }
    (gap / dt).round() as u32
}

/// Base measurement variance from a recording of a static subject: the
/// per-joint, per-axis sample standard deviations are averaged and the
/// average is squared. Joints with fewer than two samples are skipped.
pub fn calibrate_sigma_r(static_sequence: &[SkeletonDetection]) -> Result<f64> {
    let mut stds = Vec::new();
    for m in 0..NUM_JOINTS {
        let samples: Vec<Point3> = static_sequence
            .iter()
            .filter_map(|d| d.joints[m].map(|o| o.position))
            .collect();
        if samples.len() < 2 {
            continue;
        }
        let n = samples.len() as f64;
        let mean = samples.iter().sum::<Point3>() / n;
        let var = samples
            .iter()
            .map(|p| (p - mean).component_mul(&(p - mean)))
            .sum::<Vector3<f64>>()
            / (n - 1.0);
        stds.extend(var.iter().map(|v| v.sqrt()));
    }
    if stds.is_empty() {
        return Err(Error::InsufficientSamples(
            "calibration needs at least two samples of some joint".into(),
        ));
    }
    let mean_std = stds.iter().sum::<f64>() / stds.len() as f64;
    Ok(mean_std * mean_std)
}
