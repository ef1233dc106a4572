//! Simulated detection nodes.

use nalgebra::Vector3;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, UnitSphere};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::{CameraId, DetectionBatch, JointObservation, SkeletonDetection};
use crate::model::{JointId, Point3, RigidTransform, SkeletonPose, NUM_JOINTS};

/// Which joints an occlusion sector affects.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BodySide {
    Left,
    Right,
    All,
}

impl BodySide {
    fn covers(self, joint: JointId) -> bool {
        match self {
            BodySide::Left => joint.is_left(),
            BodySide::Right => joint.is_right(),
            BodySide::All => true,
        }
    }
}

/// Self-occlusion by viewing direction. The azimuth is the camera's bearing
/// in the subject's body frame: 0° straight ahead, +90° on the subject's left.
/// A sector with `from_deg > to_deg` wraps through ±180°.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OcclusionSector {
    pub from_deg: f64,
    pub to_deg: f64,
    pub side: BodySide,
    /// Confidence multiplier; 0 drops the joint.
    pub confidence_factor: f64,
}

impl OcclusionSector {
    fn contains(&self, azimuth_deg: f64) -> bool {
        if self.from_deg <= self.to_deg {
            (self.from_deg..=self.to_deg).contains(&azimuth_deg)
        } else {
            azimuth_deg >= self.from_deg || azimuth_deg <= self.to_deg
        }
    }
}

/// Noise, confidence and failure model of one node.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SensorModel {
    /// Positional σ (m) at confidence 1; scaled by 1/√c otherwise.
    pub noise_sd: f64,
    pub base_confidence: f64,
    /// Uniform per-joint confidence jitter half-width.
    pub confidence_jitter: f64,
    pub confidence_decay_per_m: f64,
    pub decay_start_m: f64,
    pub min_confidence: f64,
    /// Per joint per frame.
    pub outlier_probability: f64,
    pub outlier_min_m: f64,
    pub outlier_max_m: f64,
    pub sectors: Vec<OcclusionSector>,
    /// Radius of the torso cylinder another subject occludes with.
    pub occluder_radius_m: f64,
    pub occluder_confidence_factor: f64,
    pub fov_deg: f64,
    pub max_range_m: f64,
    /// A person is reported only with at least this many joints.
    pub min_joints: usize,
    /// σ of reported-timestamp error, clipped to a quarter period.
    pub timestamp_jitter_sd: f64,
}

impl Default for SensorModel {
    fn default() -> Self {
        SensorModel {
            noise_sd: 0.02,
            base_confidence: 0.9,
            confidence_jitter: 0.05,
            confidence_decay_per_m: 0.03,
            decay_start_m: 3.0,
            min_confidence: 0.05,
            outlier_probability: 0.05,
            outlier_min_m: 0.3,
            outlier_max_m: 1.0,
            sectors: vec![
                OcclusionSector {
                    from_deg: 50.0,
                    to_deg: 130.0,
                    side: BodySide::Right,
                    confidence_factor: 0.5,
                },
                OcclusionSector {
                    from_deg: -130.0,
                    to_deg: -50.0,
                    side: BodySide::Left,
                    confidence_factor: 0.5,
                },
                OcclusionSector {
                    from_deg: 150.0,
                    to_deg: -150.0,
                    side: BodySide::All,
                    confidence_factor: 0.85,
                },
            ],
            occluder_radius_m: 0.25,
            occluder_confidence_factor: 0.0,
            fov_deg: 120.0,
            max_range_m: 12.0,
            min_joints: 6,
            timestamp_jitter_sd: 0.0,
        }
    }
}

impl SensorModel {
    /// Noise, outliers, occlusion and confidence decay all disabled.
    pub fn ideal() -> Self {
        SensorModel {
            noise_sd: 0.0,
            base_confidence: 1.0,
            confidence_jitter: 0.0,
            confidence_decay_per_m: 0.0,
            outlier_probability: 0.0,
            sectors: Vec::new(),
            occluder_confidence_factor: 1.0,
            fov_deg: 179.0,
            max_range_m: f64::INFINITY,
            min_joints: 1,
            ..SensorModel::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let unit = |v: f64| (0.0..=1.0).contains(&v);
        if !(self.noise_sd >= 0.0 && self.noise_sd.is_finite()) {
            return Err(Error::Config("sensor.noise_sd must be >= 0".into()));
        }
        if !unit(self.outlier_probability) {
            return Err(Error::Config("sensor.outlier_probability must lie in [0, 1]".into()));
        }
        if !(0.0 < self.min_confidence && self.min_confidence <= self.base_confidence && self.base_confidence <= 1.0) {
            return Err(Error::Config("sensor confidences must satisfy 0 < min <= base <= 1".into()));
        }
        if !(0.0 <= self.outlier_min_m && self.outlier_min_m <= self.outlier_max_m) {
            return Err(Error::Config("sensor outlier magnitude range is empty".into()));
        }
        if !(self.confidence_jitter >= 0.0 && self.confidence_decay_per_m >= 0.0 && self.timestamp_jitter_sd >= 0.0) {
            return Err(Error::Config("sensor jitter and decay must be >= 0".into()));
        }
        if !(self.fov_deg > 0.0 && self.fov_deg < 180.0) {
            return Err(Error::Config("sensor.fov_deg must lie in (0, 180)".into()));
        }
        if !(self.max_range_m > 0.0 && self.occluder_radius_m >= 0.0) {
            return Err(Error::Config("sensor ranges must be positive".into()));
        }
        if !unit(self.occluder_confidence_factor) || !self.sectors.iter().all(|s| unit(s.confidence_factor)) {
            return Err(Error::Config("occlusion confidence factors must lie in [0, 1]".into()));
        }
        if self.min_joints == 0 || self.min_joints > NUM_JOINTS {
            return Err(Error::Config("sensor.min_joints must lie in 1..=15".into()));
        }
        Ok(())
    }
}

/// One subject as seen at a capture instant.
#[derive(Debug, Clone, PartialEq)]
pub struct Snapshot {
    pub pose: SkeletonPose,
    pub heading: f64,
}

impl Snapshot {
    /// Neck to hip midpoint.
    fn torso(&self) -> (Point3, Point3) {
        let p = |j| self.pose.get(j).expect("ground truth is complete");
        let hips = (p(JointId::LeftHip) + p(JointId::RightHip)) / 2.0;
        (p(JointId::Neck), hips)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CameraNode {
    pub camera_id: CameraId,
    /// Camera-to-global.
    pub extrinsic: RigidTransform,
    pub frame_rate: f64,
    /// Capture phase of the first frame (s).
    pub clock_offset: f64,
    pub sensor: SensorModel,
}

impl CameraNode {
    pub fn validate(&self) -> Result<()> {
        if self.camera_id.is_empty() {
            return Err(Error::Config("camera_id must not be empty".into()));
        }
        if !(self.frame_rate > 0.0 && self.frame_rate.is_finite()) {
            return Err(Error::Config(format!("{}: frame_rate must be positive", self.camera_id)));
        }
        if !(self.clock_offset >= 0.0 && self.clock_offset.is_finite()) {
            return Err(Error::Config(format!("{}: clock_offset must be >= 0", self.camera_id)));
        }
        self.sensor.validate()
    }

    pub fn position(&self) -> Point3 {
        *self.extrinsic.translation()
    }

    pub fn optical_axis(&self) -> Vector3<f64> {
        self.extrinsic.rotation().column(2).into_owned()
    }

    /// Capture instants in [0, duration).
    pub fn capture_times(&self, duration: f64) -> Vec<f64> {
        let period = 1.0 / self.frame_rate;
        (0..)
            .map(|k| self.clock_offset + k as f64 * period)
            .take_while(|t| *t < duration)
            .collect()
    }

    /// One frame: detections of every visible subject in the camera frame.
    pub fn observe(&self, t: f64, subjects: &[Snapshot], rng: &mut ChaCha8Rng) -> DetectionBatch {
        let s = &self.sensor;
        let timestamp = if s.timestamp_jitter_sd > 0.0 {
            let limit = 0.25 / self.frame_rate;
            let e: f64 = Normal::new(0.0, s.timestamp_jitter_sd).unwrap().sample(rng);
            t + e.clamp(-limit, limit)
        } else {
            t
        };
        let to_camera = self.extrinsic.inverse();
        let eye = self.position();
        let half_fov = s.fov_deg.to_radians() / 2.0;

        let mut detections = Vec::new();
        for (index, subject) in subjects.iter().enumerate() {
            let neck = subject.pose.get(JointId::Neck).expect("complete");
            let bearing = (eye.y - neck.y).atan2(eye.x - neck.x) - subject.heading;
            let azimuth = wrap_degrees(bearing.to_degrees());
            let mut joints: [Option<JointObservation>; NUM_JOINTS] = [None; NUM_JOINTS];
            for joint in JointId::ALL {
                let world = subject.pose.get(joint).expect("complete");
                let local = to_camera.apply(&world);
                let range = local.norm();
                // Draw every random number unconditionally so one joint's
                // visibility does not shift the stream for the rest.
                let jitter = rng.random_range(-1.0..=1.0) * s.confidence_jitter;
                let noise = Vector3::from_fn(|_, _| rng.sample::<f64, _>(rand_distr::StandardNormal));
                let spike = rng.random_bool(s.outlier_probability);
                let spike_dir = Vector3::from(UnitSphere.sample(rng));
                let spike_mag = rng.random_range(s.outlier_min_m..=s.outlier_max_m);

                let off_axis = local.xy().norm().atan2(local.z);
                if local.z <= 0.0 || off_axis > half_fov || range > s.max_range_m {
                    continue;
                }
                let mut confidence = s.base_confidence - s.confidence_decay_per_m * (range - s.decay_start_m).max(0.0);
                for sector in &s.sectors {
                    if sector.side.covers(joint) && sector.contains(azimuth) {
                        confidence *= sector.confidence_factor;
                    }
                }
                let blocked = subjects.iter().enumerate().any(|(other, snap)| {
                    other != index && {
                        let (top, bottom) = snap.torso();
                        let (d, along) = segment_distance(&eye, &world, &top, &bottom);
                        d < s.occluder_radius_m && along < 1.0
                    }
                });
                if blocked {
                    confidence *= s.occluder_confidence_factor;
                }
                if confidence <= 0.0 {
                    continue;
                }
                let confidence = (confidence + jitter).clamp(s.min_confidence, 1.0);
                let mut position = local + noise * (s.noise_sd / confidence.sqrt());
                if spike {
                    position += spike_dir * spike_mag;
                }
                joints[joint.index()] = Some(JointObservation::new(position, confidence));
            }
            if joints.iter().flatten().count() >= s.min_joints {
                detections.push(SkeletonDetection {
                    camera_id: self.camera_id.clone(),
                    timestamp,
                    joints,
                });
            }
        }
        detections.shuffle(rng);
        DetectionBatch {
            camera_id: self.camera_id.clone(),
            timestamp,
            detections,
        }
    }
}

fn wrap_degrees(a: f64) -> f64 {
    let w = (a + 180.0).rem_euclid(360.0) - 180.0;
    if w == -180.0 {
        180.0
    } else {
        w
    }
}

/// Closest distance between segments p0p1 and q0q1, and the parameter along
/// p0p1 of the closest point.
pub fn segment_distance(p0: &Point3, p1: &Point3, q0: &Point3, q1: &Point3) -> (f64, f64) {
    let d1 = p1 - p0;
    let d2 = q1 - q0;
    let r = p0 - q0;
    let a = d1.dot(&d1);
    let e = d2.dot(&d2);
    let f = d2.dot(&r);
    let (s, t) = if a <= f64::EPSILON && e <= f64::EPSILON {
        (0.0, 0.0)
    } else if a <= f64::EPSILON {
        (0.0, (f / e).clamp(0.0, 1.0))
    } else {
        let c = d1.dot(&r);
        if e <= f64::EPSILON {
            ((-c / a).clamp(0.0, 1.0), 0.0)
        } else {
            let b = d1.dot(&d2);
            let denom = a * e - b * b;
            let mut s = if denom > 0.0 {
                ((b * f - c * e) / denom).clamp(0.0, 1.0)
            } else {
                0.0
            };
            let mut t = (b * s + f) / e;
            if t < 0.0 {
                t = 0.0;
                s = (-c / a).clamp(0.0, 1.0);
            } else if t > 1.0 {
                t = 1.0;
                s = ((b - c) / a).clamp(0.0, 1.0);
            }
            (s, t)
        }
    };
    let closest_p = p0 + d1 * s;
    let closest_q = q0 + d2 * t;
    ((closest_p - closest_q).norm(), s)
}

/// Rectangle of detection nodes mounted at the corners.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CornerLayout {
    pub width_m: f64,
    pub depth_m: f64,
    pub height_m: f64,
    pub center: [f64; 2],
    /// Height of the point all nodes look at.
    pub target_height_m: f64,
    pub frame_rate: f64,
    /// Capture phase step between consecutive nodes (s).
    pub stagger_s: f64,
}

impl Default for CornerLayout {
    fn default() -> Self {
        CornerLayout {
            width_m: 6.0,
            depth_m: 6.0,
            height_m: 2.5,
            center: [0.0, 0.0],
            target_height_m: 1.0,
            frame_rate: 30.0,
            stagger_s: 0.008,
        }
    }
}

impl CornerLayout {
    pub fn target(&self) -> Point3 {
        Point3::new(self.center[0], self.center[1], self.target_height_m)
    }

    /// Four nodes ordered so that any prefix of two is a diagonal pair.
    pub fn nodes(&self, sensor: &SensorModel) -> Result<Vec<CameraNode>> {
        let (hw, hd) = (self.width_m / 2.0, self.depth_m / 2.0);
        let [cx, cy] = self.center;
        let corners = [(-hw, -hd), (hw, hd), (hw, -hd), (-hw, hd)];
        corners
            .iter()
            .enumerate()
            .map(|(i, (dx, dy))| {
                let eye = Point3::new(cx + dx, cy + dy, self.height_m);
                let node = CameraNode {
                    camera_id: format!("cam{i}"),
                    extrinsic: RigidTransform::look_at(&eye, &self.target(), &Vector3::z())?,
                    frame_rate: self.frame_rate,
                    clock_offset: i as f64 * self.stagger_s,
                    sensor: sensor.clone(),
                };
                node.validate()?;
                Ok(node)
            })
            .collect()
    }
}

/// The default four-corner network.
pub fn preset_reference_layout() -> Vec<CameraNode> {
    CornerLayout::default()
        .nodes(&SensorModel::default())
        .expect("default layout is valid")
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;

    fn standing(at: [f64; 2]) -> Snapshot {
        let mut points = [Point3::zeros(); NUM_JOINTS];
        for (i, p) in points.iter_mut().enumerate() {
            *p = Point3::new(at[0], at[1], 0.1 + 0.1 * i as f64);
        }
        let mut pose = SkeletonPose::from_points(points);
        pose.set(JointId::Neck, Some(Point3::new(at[0], at[1], 1.45)));
        pose.set(JointId::LeftHip, Some(Point3::new(at[0], at[1] + 0.1, 0.92)));
        pose.set(JointId::RightHip, Some(Point3::new(at[0], at[1] - 0.1, 0.92)));
        Snapshot { pose, heading: 0.0 }
    }

    #[test]
    fn layout_geometry() {
        let nodes = preset_reference_layout();
        assert_eq!(nodes.len(), 4);
        let target = CornerLayout::default().target();
        for n in &nodes {
            assert_eq!(n.position().z, 2.5);
            assert_eq!(n.frame_rate, 30.0);
            let to_target = target - n.position();
            // Axis passes through the center: the cross product vanishes.
            assert!(n.optical_axis().cross(&to_target.normalize()).norm() < 1e-9);
            assert!(n.optical_axis().dot(&to_target) > 0.0);
        }
        let d = |a: usize, b: usize| (nodes[a].position() - nodes[b].position()).norm();
        let diagonal = (6.0f64 * 6.0 + 6.0 * 6.0).sqrt();
        assert_abs_diff_eq!(d(0, 1), diagonal, epsilon = 1e-12);
        assert_abs_diff_eq!(d(2, 3), diagonal, epsilon = 1e-12);
        assert_abs_diff_eq!(d(0, 2), 6.0, epsilon = 1e-12);
        assert_abs_diff_eq!(d(0, 3), 6.0, epsilon = 1e-12);
        assert_abs_diff_eq!(d(1, 2), 6.0, epsilon = 1e-12);
    }

    #[test]
    fn rectangular_layout_sides() {
        let layout = CornerLayout {
            width_m: 8.0,
            depth_m: 5.0,
            ..CornerLayout::default()
        };
        let nodes = layout.nodes(&SensorModel::default()).unwrap();
        let d = |a: usize, b: usize| (nodes[a].position() - nodes[b].position()).norm();
        assert_abs_diff_eq!(d(0, 1), (64.0f64 + 25.0).sqrt(), epsilon = 1e-12);
        assert_abs_diff_eq!(d(0, 2), 8.0, epsilon = 1e-12);
        assert_abs_diff_eq!(d(0, 3), 5.0, epsilon = 1e-12);
    }

    #[test]
    fn ideal_sensor_reports_truth() {
        let node = CameraNode {
            camera_id: "c".into(),
            extrinsic: RigidTransform::identity(),
            frame_rate: 30.0,
            clock_offset: 0.0,
            sensor: SensorModel::ideal(),
        };
        // Identity extrinsic: the camera looks along +z from the origin.
        let mut snap = standing([0.0, 0.0]);
        for j in JointId::ALL {
            let p = snap.pose.get(j).unwrap();
            snap.pose.set(j, Some(Point3::new(p.x, p.y, p.z + 3.0)));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let batch = node.observe(0.5, std::slice::from_ref(&snap), &mut rng);
        assert_eq!(batch.detections.len(), 1);
        for j in JointId::ALL {
            let obs = batch.detections[0].joints[j.index()].unwrap();
            assert_eq!(obs.position, snap.pose.get(j).unwrap());
            assert_eq!(obs.confidence, 1.0);
        }
    }

    #[test]
    fn capture_counts_follow_rate() {
        let mut node = preset_reference_layout().remove(0);
        for (rate, expected) in [(30.0, 1800usize), (25.0, 1500), (20.0, 1200)] {
            node.frame_rate = rate;
            let n = node.capture_times(60.0).len();
            assert!(n.abs_diff(expected) <= 1, "{rate} Hz: {n}");
        }
        node.frame_rate = 30.0;
        let times = node.capture_times(2.0);
        assert!(times.windows(2).all(|w| (w[1] - w[0] - 1.0 / 30.0).abs() < 1e-12));
    }

    #[test]
    fn torso_blocks_line_of_sight() {
        let node = CameraNode {
            camera_id: "c".into(),
            extrinsic: RigidTransform::look_at(&Point3::new(-3.0, 0.0, 1.0), &Point3::new(0.0, 0.0, 1.0), &Vector3::z())
                .unwrap(),
            frame_rate: 30.0,
            clock_offset: 0.0,
            sensor: SensorModel {
                occluder_confidence_factor: 0.0,
                ..SensorModel::ideal()
            },
        };
        // The nearer subject stands between the camera and the farther one.
        let near = standing([-1.0, 0.0]);
        let far = standing([1.0, 0.0]);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let batch = node.observe(0.0, &[near, far], &mut rng);
        let counts: Vec<_> = batch.detections.iter().map(|d| d.joints.iter().flatten().count()).collect();
        assert_eq!(counts.len(), 2);
        assert!(counts.contains(&15));
        assert!(counts.iter().any(|c| *c < 15));
    }

    #[test]
    fn side_view_degrades_far_side() {
        let node = CameraNode {
            camera_id: "c".into(),
            // Camera on the subject's left (+y when facing +x).
            extrinsic: RigidTransform::look_at(&Point3::new(0.0, 3.0, 1.0), &Point3::new(0.0, 0.0, 1.0), &Vector3::z())
                .unwrap(),
            frame_rate: 30.0,
            clock_offset: 0.0,
            sensor: SensorModel {
                noise_sd: 0.0,
                confidence_jitter: 0.0,
                confidence_decay_per_m: 0.0,
                outlier_probability: 0.0,
                ..SensorModel::default()
            },
        };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let batch = node.observe(0.0, &[standing([0.0, 0.0])], &mut rng);
        let det = &batch.detections[0];
        let c = |j: JointId| det.joints[j.index()].unwrap().confidence;
        assert_abs_diff_eq!(c(JointId::LeftElbow), 0.9, epsilon = 1e-12);
        assert_abs_diff_eq!(c(JointId::RightElbow), 0.45, epsilon = 1e-12);
    }

    #[test]
    fn sector_wrap_and_azimuth() {
        let back = OcclusionSector {
            from_deg: 150.0,
            to_deg: -150.0,
            side: BodySide::All,
            confidence_factor: 0.5,
        };
        assert!(back.contains(180.0) && back.contains(-170.0) && !back.contains(0.0));
        assert_eq!(wrap_degrees(-180.0), 180.0);
        assert_abs_diff_eq!(wrap_degrees(370.0), 10.0, epsilon = 1e-12);
    }

    #[test]
    fn segment_distance_cases() {
        let o = Point3::zeros();
        let x = Point3::new(2.0, 0.0, 0.0);
        // Crossing segments offset in z.
        let (d, s) = segment_distance(&o, &x, &Point3::new(1.0, -1.0, 0.5), &Point3::new(1.0, 1.0, 0.5));
        assert_abs_diff_eq!(d, 0.5, epsilon = 1e-12);
        assert_abs_diff_eq!(s, 0.5, epsilon = 1e-12);
        // Parallel segments.
        let (d, _) = segment_distance(&o, &x, &Point3::new(0.0, 0.3, 0.0), &Point3::new(2.0, 0.3, 0.0));
        assert_abs_diff_eq!(d, 0.3, epsilon = 1e-12);
        // Beyond the end.
        let (d, s) = segment_distance(&o, &x, &Point3::new(3.0, 0.0, 0.0), &Point3::new(4.0, 0.0, 0.0));
        assert_abs_diff_eq!(d, 1.0, epsilon = 1e-12);
        assert_eq!(s, 1.0);
    }

    #[test]
    fn invalid_sensor_is_rejected() {
        let bad = SensorModel {
            outlier_probability: 1.5,
            ..SensorModel::default()
        };
        assert!(bad.validate().is_err());
        let bad = SensorModel {
            noise_sd: -1.0,
            ..SensorModel::default()
        };
        assert!(bad.validate().is_err());
    }
}
