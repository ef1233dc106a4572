//! Error metrics against ground truth, the moving-average baseline and
//! run reports.

use std::collections::{BTreeMap, VecDeque};
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::JointStatus;
use crate::ingest::SkeletonDetection;
use crate::model::{JointId, Point3, SkeletonPose, NUM_JOINTS};
use crate::pipeline::{run_pipeline, BatchTiming, PipelineConfig, Replay, TrackFrame, Variant};
use crate::sim::{generate_scene, GroundTruthLog, Scene, SubjectTrajectory};

/// Per-joint unweighted mean of the last `window` observed positions.
#[derive(Debug, Clone, PartialEq)]
pub struct MovingAverage {
    window: usize,
    samples: [VecDeque<Point3>; NUM_JOINTS],
}

impl MovingAverage {
    pub fn new(window: usize) -> Self {
        MovingAverage {
            window: window.max(1),
            samples: Default::default(),
        }
    }

    /// Adds the observed joints of a (global-frame) detection. Joints never
    /// observed so far start at the detection centroid.
    pub fn push(&mut self, detection: &SkeletonDetection) -> Result<[JointStatus; NUM_JOINTS]> {
        let centroid = detection.centroid()?;
        let mut status = [JointStatus::Accepted; NUM_JOINTS];
        for (m, samples) in self.samples.iter_mut().enumerate() {
            let value = match detection.joints[m] {
                Some(obs) => obs.position,
                None => {
                    status[m] = JointStatus::Substituted;
                    if !samples.is_empty() {
                        continue;
                    }
                    centroid
                }
            };
            if samples.len() == self.window {
                samples.pop_front();
            }
            samples.push_back(value);
        }
        Ok(status)
    }

    pub fn pose(&self) -> SkeletonPose {
        SkeletonPose {
            joints: std::array::from_fn(|m| {
                let s = &self.samples[m];
                (!s.is_empty()).then(|| s.iter().sum::<Point3>() / s.len() as f64)
            }),
        }
    }
}

/// Moving-average estimates for an already associated detection stream
/// (global frame), one output per input.
pub fn baseline_maf(detections: &[(u64, SkeletonDetection)], window: usize) -> Result<Vec<TrackFrame>> {
    let mut filters: BTreeMap<u64, MovingAverage> = BTreeMap::new();
    detections
        .iter()
        .map(|(track_id, det)| {
            let avg = filters.entry(*track_id).or_insert_with(|| MovingAverage::new(window));
            let status = avg.push(det)?;
            let pose = avg.pose();
            Ok(TrackFrame {
                timestamp: det.timestamp,
                track_id: *track_id,
                pose,
                fused: pose,
                status,
            })
        })
        .collect()
}

/// Linear interpolation of a trajectory; None outside its time range.
pub fn interpolate(traj: &SubjectTrajectory, t: f64) -> Option<SkeletonPose> {
    let ts = &traj.timestamps;
    if ts.is_empty() || t < ts[0] || t > *ts.last().unwrap() {
        return None;
    }
    let i = ts.partition_point(|x| *x <= t);
    if i == ts.len() {
        return Some(traj.poses[i - 1]);
    }
    let (t0, t1) = (ts[i - 1], ts[i]);
    if t == t0 {
        return Some(traj.poses[i - 1]);
    }
    let u = (t - t0) / (t1 - t0);
    let (a, b) = (&traj.poses[i - 1], &traj.poses[i]);
    Some(SkeletonPose {
        joints: std::array::from_fn(|m| match (a.joints[m], b.joints[m]) {
            (Some(p), Some(q)) => Some(p + (q - p) * u),
            _ => None,
        }),
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AlignedFrame {
    pub timestamp: f64,
    pub track_id: u64,
    pub estimate: SkeletonPose,
    pub truth: SkeletonPose,
}

/// One subject's estimates paired with interpolated truth.
#[derive(Debug, Clone, PartialEq)]
pub struct AlignedSequence {
    pub subject_id: String,
    pub track_ids: Vec<u64>,
    pub frames: Vec<AlignedFrame>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MatchConfig {
    /// Tracks with fewer frames are ignored.
    pub min_track_frames: usize,
    /// Tracks farther than this (mean centroid distance, m) from every
    /// subject are ignored.
    pub max_match_distance: f64,
}

impl Default for MatchConfig {
    fn default() -> Self {
        MatchConfig {
            min_track_frames: 10,
            max_match_distance: 1.0,
        }
    }
}

const TIE_TOLERANCE: f64 = 1e-9;

fn present_centroid(pose: &SkeletonPose) -> Option<Point3> {
    pose.centroid().ok()
}

/// Pairs estimates with truth. Each track goes to the subject with the
/// smallest mean centroid distance over the track's lifetime; a subject's
/// sequence merges all its tracks, preferring the longer track when two
/// report the same instant.
pub fn align(frames: &[TrackFrame], truth: &GroundTruthLog) -> Result<Vec<AlignedSequence>> {
    align_with(frames, truth, &MatchConfig::default())
}

pub fn align_with(frames: &[TrackFrame], truth: &GroundTruthLog, cfg: &MatchConfig) -> Result<Vec<AlignedSequence>> {
    let mut by_track: BTreeMap<u64, Vec<&TrackFrame>> = BTreeMap::new();
    for f in frames {
        by_track.entry(f.track_id).or_default().push(f);
    }

    let mut any_overlap = false;
    let mut assigned: BTreeMap<usize, Vec<u64>> = BTreeMap::new();
    for (&track_id, track_frames) in &by_track {
        let mut means = Vec::with_capacity(truth.subjects.len());
        for subject in &truth.subjects {
            let mut sum = 0.0;
            let mut n = 0usize;
            for f in track_frames {
                let (Some(gt), Some(est)) = (interpolate(subject, f.timestamp), present_centroid(&f.pose)) else {
                    continue;
                };
                if let Some(c) = present_centroid(&gt) {
                    sum += (est - c).norm();
                    n += 1;
                }
            }
            any_overlap |= n > 0;
            means.push((n > 0).then(|| sum / n as f64));
        }
        if track_frames.len() < cfg.min_track_frames {
            continue;
        }
        let mut ranked: Vec<(usize, f64)> = means.iter().enumerate().filter_map(|(i, m)| m.map(|m| (i, m))).collect();
        ranked.sort_by(|a, b| a.1.total_cmp(&b.1));
        let Some(&(best, best_d)) = ranked.first() else {
            continue;
        };
        if best_d > cfg.max_match_distance {
            log::debug!("track {track_id} matches no subject (nearest {best_d:.3} m)");
            continue;
        }
        let tied: Vec<u64> = ranked
            .iter()
            .filter(|(_, d)| (d - best_d).abs() <= TIE_TOLERANCE)
            .map(|(i, _)| *i as u64)
            .collect();
        if tied.len() > 1 {
            return Err(Error::AmbiguousCorrespondence {
                track: track_id,
                candidates: tied,
            });
        }
        assigned.entry(best).or_default().push(track_id);
    }
    if !any_overlap {
        return Err(Error::NoOverlap);
    }

    let mut sequences = Vec::with_capacity(truth.subjects.len());
    for (i, subject) in truth.subjects.iter().enumerate() {
        let Some(tracks) = assigned.get(&i) else {
            return Err(Error::SubjectMismatch(format!(
                "subject `{}` has no matching track ({} subjects, {} tracks with at least {} frames)",
                subject.subject_id,
                truth.subjects.len(),
                by_track.values().filter(|f| f.len() >= cfg.min_track_frames).count(),
                cfg.min_track_frames
            )));
        };
        // Longer tracks win duplicate timestamps.
        let mut ranked = tracks.clone();
        ranked.sort_by_key(|id| (std::cmp::Reverse(by_track[id].len()), *id));
        let mut chosen: BTreeMap<u64, AlignedFrame> = BTreeMap::new();
        for id in &ranked {
            for f in &by_track[id] {
                let Some(gt) = interpolate(subject, f.timestamp) else {
                    continue;
                };
                chosen.entry(f.timestamp.to_bits()).or_insert(AlignedFrame {
                    timestamp: f.timestamp,
                    track_id: *id,
                    estimate: f.pose,
                    truth: gt,
                });
            }
        }
        let mut frames: Vec<AlignedFrame> = chosen.into_values().collect();
        frames.sort_by(|a, b| a.timestamp.total_cmp(&b.timestamp));
        let mut track_ids = tracks.clone();
        track_ids.sort_unstable();
        sequences.push(AlignedSequence {
            subject_id: subject.subject_id.clone(),
            track_ids,
            frames,
        });
    }
    Ok(sequences)
}

/// Error statistics of one aligned sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct ErrorReport {
    pub subject_id: String,
    pub frames: usize,
    /// Summed-joint displacement error: mean and population σ over frames
    /// of ‖Σ_m q_est − Σ_m q_gt‖.
    pub e_avg: f64,
    pub e_sd: f64,
    /// Mean per-joint Euclidean error over frames and joints.
    pub mpjpe: f64,
    pub mpjpe_sd: f64,
    /// Mean Euclidean error of each joint.
    pub per_joint: [f64; NUM_JOINTS],
}

fn mean_sd(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Joints missing from either side are left out of both sums.
pub fn displacement_metrics(seq: &AlignedSequence) -> ErrorReport {
    let mut summed = Vec::with_capacity(seq.frames.len());
    let mut joint_errors = Vec::with_capacity(seq.frames.len() * NUM_JOINTS);
    let mut per_joint_sum = [0.0; NUM_JOINTS];
    let mut per_joint_n = [0usize; NUM_JOINTS];
    for f in &seq.frames {
        let mut q_est = Point3::zeros();
        let mut q_gt = Point3::zeros();
        for j in JointId::ALL {
            if let (Some(e), Some(g)) = (f.estimate.get(j), f.truth.get(j)) {
                q_est += e;
                q_gt += g;
                let d = (e - g).norm();
                joint_errors.push(d);
                per_joint_sum[j.index()] += d;
                per_joint_n[j.index()] += 1;
            }
        }
        summed.push((q_est - q_gt).norm());
    }
    let (e_avg, e_sd) = mean_sd(&summed);
    let (mpjpe, mpjpe_sd) = mean_sd(&joint_errors);
    ErrorReport {
        subject_id: seq.subject_id.clone(),
        frames: seq.frames.len(),
        e_avg,
        e_sd,
        mpjpe,
        mpjpe_sd,
        per_joint: std::array::from_fn(|m| per_joint_sum[m] / per_joint_n[m].max(1) as f64),
    }
}

/// Metrics for every subject of a run.
pub fn evaluate(frames: &[TrackFrame], truth: &GroundTruthLog) -> Result<Vec<ErrorReport>> {
    Ok(align(frames, truth)?.iter().map(displacement_metrics).collect())
}

/// Frames per second of an aligned sequence's output, from its timestamps.
pub fn output_rate(seq: &AlignedSequence) -> f64 {
    match (seq.frames.first(), seq.frames.last()) {
        (Some(a), Some(b)) if b.timestamp > a.timestamp => (seq.frames.len() - 1) as f64 / (b.timestamp - a.timestamp),
        _ => 0.0,
    }
}

/// One CSV row of a report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub sequence: String,
    pub seed: u64,
    pub variant: String,
    pub camera_count: usize,
    pub subject: String,
    pub frames: usize,
    pub e_avg_m: f64,
    pub e_sd_m: f64,
    pub mpjpe_m: f64,
    pub fps: f64,
}

pub fn report_rows(
    sequence: &str,
    seed: u64,
    variant: Variant,
    camera_count: usize,
    sequences: &[AlignedSequence],
) -> Vec<ReportRow> {
    sequences
        .iter()
        .map(|seq| {
            let r = displacement_metrics(seq);
            ReportRow {
                sequence: sequence.into(),
                seed,
                variant: variant.name().into(),
                camera_count,
                subject: r.subject_id,
                frames: r.frames,
                e_avg_m: r.e_avg,
                e_sd_m: r.e_sd,
                mpjpe_m: r.mpjpe,
                fps: output_rate(seq),
            }
        })
        .collect()
}

pub fn write_report<W: Write>(out: W, rows: &[ReportRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for row in rows {
        w.serialize(row)?;
    }
    if rows.is_empty() {
        w.write_record(["sequence", "seed", "variant", "camera_count", "subject", "frames", "e_avg_m", "e_sd_m", "mpjpe_m", "fps"])?;
    }
    w.flush().map_err(|e| Error::io("<report>", e))?;
    Ok(())
}

pub fn write_report_file(path: &Path, rows: &[ReportRow]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_report(std::io::BufWriter::new(file), rows)
}

pub fn read_report_file(path: &Path) -> Result<Vec<ReportRow>> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<std::result::Result<_, _>>()?)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CameraCountReport {
    pub camera_count: usize,
    /// Outside the 2 to 4 node networks the method was built for.
    pub outside_reference_range: bool,
    pub reports: Vec<ErrorReport>,
}

impl CameraCountReport {
    /// MPJPE averaged over subjects.
    pub fn mean_mpjpe(&self) -> f64 {
        self.reports.iter().map(|r| r.mpjpe).sum::<f64>() / self.reports.len() as f64
    }
}

/// Reruns the same pipeline on the first `count` nodes for each count.
pub fn ablation_camera_count(
    scene: &Scene,
    cfg: &PipelineConfig,
    variant: Variant,
    counts: &[usize],
    seed: u64,
) -> Result<Vec<CameraCountReport>> {
    counts
        .iter()
        .map(|&count| {
            let sub = scene.with_cameras(count)?;
            let out = generate_scene(&sub, seed);
            let run = run_pipeline(cfg, variant, &sub.extrinsics(), out.streams, Replay::Merged)?;
            Ok(CameraCountReport {
                camera_count: count,
                outside_reference_range: !(2..=4).contains(&count),
                reports: evaluate(&run.frames, &out.truth)?,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StageStats {
    pub stage: String,
    pub mean_ms: f64,
    pub p95_ms: f64,
}

/// Latency summary of an instrumented run.
#[derive(Debug, Clone, PartialEq)]
pub struct TimingReport {
    pub batches: usize,
    pub stages: Vec<StageStats>,
    /// Association + fusion + consistency per processed detection (ms).
    pub per_subject_update_ms: f64,
    pub end_to_end_ms: f64,
    /// (subjects, worst-case ms, theoretical fps).
    pub fps_table: Vec<(usize, f64, f64)>,
}

fn percentile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return 0.0;
    }
    let rank = (q * (sorted.len() - 1) as f64).round() as usize;
    sorted[rank.min(sorted.len() - 1)]
}

pub fn timing_report(timings: &[BatchTiming]) -> TimingReport {
    let stage = |name: &str, get: fn(&BatchTiming) -> f64| {
        let mut v: Vec<f64> = timings.iter().map(|t| get(t) * 1e3).collect();
        v.sort_by(f64::total_cmp);
        StageStats {
            stage: name.into(),
            mean_ms: if v.is_empty() { 0.0 } else { v.iter().sum::<f64>() / v.len() as f64 },
            p95_ms: percentile(&v, 0.95),
        }
    };
    let stages = vec![
        stage("association", |t| t.association),
        stage("fusion", |t| t.fusion),
        stage("consistency", |t| t.consistency),
        stage("other", |t| t.other),
        stage("total", |t| t.total),
    ];
    let busy: Vec<&BatchTiming> = timings.iter().filter(|t| t.detections > 0).collect();
    let work: f64 = busy.iter().map(|t| t.association + t.fusion + t.consistency).sum();
    let updates: usize = busy.iter().map(|t| t.detections).sum();
    let per_subject_update_ms = if updates == 0 { 0.0 } else { work * 1e3 / updates as f64 };
    let fps_table = (1..=6)
        .map(|n| {
            let ms = per_subject_update_ms * n as f64;
            (n, ms, if ms > 0.0 { 1000.0 / ms } else { f64::INFINITY })
        })
        .collect();
    TimingReport {
        batches: timings.len(),
        end_to_end_ms: stages[4].mean_ms,
        stages,
        per_subject_update_ms,
        fps_table,
    }
}

impl TimingReport {
    pub fn write<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "stage,mean_ms,p95_ms")?;
        for s in &self.stages {
            writeln!(out, "{},{:.6},{:.6}", s.stage, s.mean_ms, s.p95_ms)?;
        }
        writeln!(out)?;
        writeln!(out, "per_subject_update_ms,{:.6}", self.per_subject_update_ms)?;
        writeln!(out)?;
        writeln!(out, "subjects,worst_case_ms,theoretical_fps")?;
        for (n, ms, fps) in &self.fps_table {
            writeln!(out, "{n},{ms:.6},{fps:.3}")?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::JointObservation;
    use crate::model::RigidTransform;
    use approx::assert_abs_diff_eq;
    use nalgebra::Vector3;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn pose_at(offset: f64) -> SkeletonPose {
        SkeletonPose::from_points(std::array::from_fn(|m| {
            Point3::new(offset + 0.1 * m as f64, 0.05 * m as f64, 1.0 + 0.02 * m as f64)
        }))
    }

    fn trajectory(id: &str, n: usize, rate: f64, velocity: Vector3<f64>) -> SubjectTrajectory {
        let timestamps: Vec<f64> = (0..n).map(|k| k as f64 / rate).collect();
        let poses = timestamps
            .iter()
            .map(|t| pose_at(0.0).transform(&RigidTransform::from_translation(velocity * *t)))
            .collect();
        SubjectTrajectory {
            subject_id: id.into(),
            timestamps,
            poses,
        }
    }

    fn frames_from(traj: &SubjectTrajectory, track_id: u64, times: &[f64], offset: Vector3<f64>) -> Vec<TrackFrame> {
        times
            .iter()
            .map(|t| {
                let pose = interpolate(traj, *t).unwrap().transform(&RigidTransform::from_translation(offset));
                TrackFrame {
                    timestamp: *t,
                    track_id,
                    pose,
                    fused: pose,
                    status: [JointStatus::Accepted; NUM_JOINTS],
                }
            })
            .collect()
    }

    fn detection(points: &[Option<Point3>]) -> SkeletonDetection {
        SkeletonDetection {
            camera_id: "c".into(),
            timestamp: 0.0,
            joints: std::array::from_fn(|m| points.get(m).copied().flatten().map(|p| JointObservation::new(p, 1.0))),
        }
    }

    #[test]
    fn interpolation_cases() {
        let traj = trajectory("s", 101, 100.0, Vector3::new(0.7, -0.2, 0.1));
        // Exact samples come back unchanged.
        assert_eq!(interpolate(&traj, 0.25).unwrap(), traj.poses[25]);
        // Linear motion: interpolation is exact everywhere.
        for t in [0.0333, 0.5, 0.9999, 1.0] {
            let expected = pose_at(0.0).transform(&RigidTransform::from_translation(Vector3::new(0.7, -0.2, 0.1) * t));
            let got = interpolate(&traj, t).unwrap();
            for j in JointId::ALL {
                assert!((got.get(j).unwrap() - expected.get(j).unwrap()).norm() < 1e-12);
            }
        }
        assert!(interpolate(&traj, -0.01).is_none());
        assert!(interpolate(&traj, 1.01).is_none());
    }

    #[test]
    fn thirty_hz_estimates_all_get_truth() {
        let traj = trajectory("s", 301, 100.0, Vector3::new(0.5, 0.0, 0.0));
        let times: Vec<f64> = (0..90).map(|k| k as f64 / 30.0).collect();
        let frames = frames_from(&traj, 1, &times, Vector3::zeros());
        let seqs = align(&frames, &GroundTruthLog { subjects: vec![traj] }).unwrap();
        assert_eq!(seqs[0].frames.len(), 90);
        let r = displacement_metrics(&seqs[0]);
        assert!(r.e_avg < 1e-12 && r.mpjpe < 1e-12);
    }

    #[test]
    fn metric_examples() {
        let traj = trajectory("s", 50, 10.0, Vector3::new(0.2, 0.1, 0.0));
        let times: Vec<f64> = (0..40).map(|k| k as f64 * 0.1).collect();
        let exact = frames_from(&traj, 1, &times, Vector3::zeros());
        let truth = GroundTruthLog {
            subjects: vec![traj.clone()],
        };
        let r = &evaluate(&exact, &truth).unwrap()[0];
        assert_eq!((r.e_avg, r.e_sd), (0.0, 0.0));

        // Offset on one joint only.
        let mut shifted = exact.clone();
        for f in &mut shifted {
            let p = f.pose.get(JointId::LeftWrist).unwrap();
            f.pose.set(JointId::LeftWrist, Some(p + Vector3::new(0.01, 0.0, 0.0)));
        }
        let r = &evaluate(&shifted, &truth).unwrap()[0];
        assert_abs_diff_eq!(r.e_avg, 0.01, epsilon = 1e-12);
        assert_abs_diff_eq!(r.e_sd, 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(r.mpjpe, 0.01 / 15.0, epsilon = 1e-12);
        assert_abs_diff_eq!(r.per_joint[JointId::LeftWrist.index()], 0.01, epsilon = 1e-12);
        assert_eq!(r.per_joint[JointId::Neck.index()], 0.0);

        // Opposite offsets cancel in the summed metric but not per joint.
        let mut opposite = shifted.clone();
        for f in &mut opposite {
            let p = f.pose.get(JointId::RightWrist).unwrap();
            f.pose.set(JointId::RightWrist, Some(p - Vector3::new(0.01, 0.0, 0.0)));
        }
        let r = &evaluate(&opposite, &truth).unwrap()[0];
        assert!(r.e_avg < 1e-12);
        assert_abs_diff_eq!(r.mpjpe, 0.02 / 15.0, epsilon = 1e-12);
    }

    #[test]
    fn metrics_match_streaming_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let traj = trajectory("s", 200, 50.0, Vector3::new(0.3, 0.3, 0.0));
        let times: Vec<f64> = (0..150).map(|k| k as f64 * 0.02).collect();
        let mut frames = frames_from(&traj, 1, &times, Vector3::zeros());
        for f in &mut frames {
            for j in JointId::ALL {
                let p = f.pose.get(j).unwrap();
                f.pose.set(j, Some(p + Vector3::from_fn(|_, _| rng.random_range(-0.05..0.05))));
            }
        }
        let seq = &align(&frames, &GroundTruthLog { subjects: vec![traj] }).unwrap()[0];
        let r = displacement_metrics(seq);
        // Welford running mean and variance.
        let (mut n, mut mean, mut m2) = (0.0, 0.0, 0.0);
        for f in &seq.frames {
            let mut d = Vector3::zeros();
            for j in JointId::ALL {
                d += f.estimate.get(j).unwrap() - f.truth.get(j).unwrap();
            }
            let x = d.norm();
            n += 1.0;
            let delta = x - mean;
            mean += delta / n;
            m2 += delta * (x - mean);
        }
        assert_abs_diff_eq!(r.e_avg, mean, epsilon = 1e-12);
        assert_abs_diff_eq!(r.e_sd, (m2 / n).sqrt(), epsilon = 1e-12);
    }

    #[test]
    fn correspondence_and_errors() {
        let a = trajectory("a", 300, 100.0, Vector3::new(0.2, 0.0, 0.0));
        let mut b = trajectory("b", 300, 100.0, Vector3::new(0.2, 0.0, 0.0));
        for p in &mut b.poses {
            *p = p.transform(&RigidTransform::from_translation(Vector3::new(0.0, 2.0, 0.0)));
        }
        let times: Vec<f64> = (0..80).map(|k| k as f64 / 30.0).collect();
        let mut frames = frames_from(&b, 7, &times, Vector3::new(0.01, 0.0, 0.0));
        frames.extend(frames_from(&a, 3, &times, Vector3::zeros()));
        let truth = GroundTruthLog {
            subjects: vec![a.clone(), b.clone()],
        };
        let seqs = align(&frames, &truth).unwrap();
        assert_eq!(seqs[0].track_ids, vec![3]);
        assert_eq!(seqs[1].track_ids, vec![7]);

        // A subject without a track.
        let only_a = frames_from(&a, 3, &times, Vector3::zeros());
        assert!(matches!(align(&only_a, &truth), Err(Error::SubjectMismatch(_))));

        // Equidistant track.
        let mut middle = a.clone();
        for p in &mut middle.poses {
            *p = p.transform(&RigidTransform::from_translation(Vector3::new(0.0, 1.0, 0.0)));
        }
        let mut tie = frames_from(&middle, 9, &times, Vector3::zeros());
        tie.extend(frames.iter().cloned());
        let far = GroundTruthLog {
            subjects: vec![a.clone(), b.clone()],
        };
        let cfg = MatchConfig {
            max_match_distance: 5.0,
            ..MatchConfig::default()
        };
        match align_with(&tie, &far, &cfg) {
            Err(Error::AmbiguousCorrespondence { track, candidates }) => {
                assert_eq!(track, 9);
                assert_eq!(candidates, vec![0, 1]);
            }
            other => panic!("{other:?}"),
        }

        // Disjoint time ranges.
        let late: Vec<f64> = (0..20).map(|k| 10.0 + k as f64).collect();
        let mut never = frames_from(&a, 1, &[0.0], Vector3::zeros());
        for (f, t) in never.iter_mut().zip(&late) {
            f.timestamp = *t;
        }
        assert!(matches!(align(&never, &truth), Err(Error::NoOverlap)));
    }

    #[test]
    fn duplicate_timestamps_prefer_longer_track() {
        let a = trajectory("a", 300, 100.0, Vector3::new(0.2, 0.0, 0.0));
        let long: Vec<f64> = (0..60).map(|k| k as f64 / 30.0).collect();
        let mut frames = frames_from(&a, 1, &long, Vector3::zeros());
        frames.extend(frames_from(&a, 2, &long[..20], Vector3::new(0.05, 0.0, 0.0)));
        let seq = &align(&frames, &GroundTruthLog { subjects: vec![a] }).unwrap()[0];
        assert_eq!(seq.track_ids, vec![1, 2]);
        assert_eq!(seq.frames.len(), 60);
        assert!(seq.frames.iter().all(|f| f.track_id == 1));
        assert!(seq.frames.windows(2).all(|w| w[1].timestamp > w[0].timestamp));
    }

    #[test]
    fn moving_average_cases() {
        let p = |x: f64| Some(Point3::new(x, 0.0, 0.0));
        // Window 1 is the identity.
        let mut one = MovingAverage::new(1);
        for x in [0.3, -1.0, 2.5] {
            one.push(&detection(&[p(x); 15])).unwrap();
            assert_eq!(one.pose().get(JointId::Neck), p(x));
        }
        // Constant signal.
        let mut five = MovingAverage::new(5);
        for _ in 0..9 {
            five.push(&detection(&[p(1.5); 15])).unwrap();
            assert_abs_diff_eq!(five.pose().get(JointId::Head).unwrap().x, 1.5, epsilon = 1e-15);
        }
        // Step response against direct convolution with a 5-tap box.
        let input: Vec<f64> = (0..12).map(|k| if k < 4 { 0.0 } else { 1.0 }).collect();
        let mut avg = MovingAverage::new(5);
        for (k, x) in input.iter().enumerate() {
            avg.push(&detection(&[p(*x); 15])).unwrap();
            let lo = k.saturating_sub(4);
            let expected = input[lo..=k].iter().sum::<f64>() / (k - lo + 1) as f64;
            assert_abs_diff_eq!(avg.pose().get(JointId::Neck).unwrap().x, expected, epsilon = 1e-15);
        }
    }

    #[test]
    fn missing_joints_hold_and_seed() {
        let mut avg = MovingAverage::new(3);
        let mut pts = vec![Some(Point3::new(1.0, 0.0, 0.0)); 15];
        pts[4] = None;
        let status = avg.push(&detection(&pts)).unwrap();
        assert_eq!(status[4], JointStatus::Substituted);
        // Seeded at the centroid of the observed joints.
        assert_eq!(avg.pose().get(JointId::from_index(4).unwrap()), Some(Point3::new(1.0, 0.0, 0.0)));
        pts[4] = Some(Point3::new(4.0, 0.0, 0.0));
        avg.push(&detection(&pts)).unwrap();
        assert_abs_diff_eq!(avg.pose().joints[4].unwrap().x, 2.5, epsilon = 1e-15);
    }

    #[test]
    fn baseline_maf_keeps_tracks_apart() {
        let p = |x: f64| detection(&[Some(Point3::new(x, 0.0, 0.0)); 15]);
        let stream = vec![(1, p(0.0)), (2, p(10.0)), (1, p(1.0)), (2, p(11.0))];
        let out = baseline_maf(&stream, 2).unwrap();
        assert_abs_diff_eq!(out[2].pose.get(JointId::Neck).unwrap().x, 0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(out[3].pose.get(JointId::Neck).unwrap().x, 10.5, epsilon = 1e-15);
        let raw = baseline_maf(&stream, 1).unwrap();
        for (f, (_, d)) in raw.iter().zip(&stream) {
            assert_eq!(f.pose, d.pose());
        }
    }

    #[test]
    fn timing_accounting() {
        let timings: Vec<BatchTiming> = (0..100)
            .map(|k| BatchTiming {
                timestamp: k as f64,
                detections: 2,
                tracks: 2,
                association: 1e-4,
                fusion: 2e-4,
                consistency: 3e-4,
                other: 4e-5,
                total: 6.4e-4,
            })
            .collect();
        let r = timing_report(&timings);
        let sum: f64 = r.stages[..4].iter().map(|s| s.mean_ms).sum();
        assert!((sum - r.end_to_end_ms).abs() <= 0.05 * r.end_to_end_ms);
        assert_abs_diff_eq!(r.per_subject_update_ms, 0.3, epsilon = 1e-12);
        assert_abs_diff_eq!(r.fps_table[0].2, 1000.0 / 0.3, epsilon = 1e-9);
        assert_abs_diff_eq!(r.fps_table[1].2 * 2.0, r.fps_table[0].2, epsilon = 1e-9);
        let mut buf = Vec::new();
        r.write(&mut buf).unwrap();
        assert!(String::from_utf8(buf).unwrap().starts_with("stage,mean_ms,p95_ms\nassociation,"));
    }

    #[test]
    fn report_csv_round_trip() {
        let rows = vec![ReportRow {
            sequence: "walk".into(),
            seed: 3,
            variant: "full".into(),
            camera_count: 4,
            subject: "s1".into(),
            frames: 10,
            e_avg_m: 0.125,
            e_sd_m: 0.01,
            mpjpe_m: 0.03,
            fps: 120.0,
        }];
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.csv");
        write_report_file(&path, &rows).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("sequence,seed,variant,camera_count,subject,frames,e_avg_m,e_sd_m,mpjpe_m,fps\n"));
        assert_eq!(read_report_file(&path).unwrap(), rows);
    }

    proptest! {
        #[test]
        fn metrics_invariant_under_rigid_motion(
            seed in 0u64..1000,
            axis in prop::array::uniform3(-1.0f64..1.0),
            angle in -3.0f64..3.0,
            shift in prop::array::uniform3(-5.0f64..5.0),
        ) {
            let axis = Vector3::from(axis);
            prop_assume!(axis.norm() > 1e-3);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let traj = trajectory("s", 100, 50.0, Vector3::new(0.3, 0.0, 0.0));
            let times: Vec<f64> = (0..40).map(|k| k as f64 * 0.04).collect();
            let mut frames = frames_from(&traj, 1, &times, Vector3::zeros());
            for f in &mut frames {
                for j in JointId::ALL {
                    let p = f.pose.get(j).unwrap();
                    f.pose.set(j, Some(p + Vector3::from_fn(|_, _| rng.random_range(-0.05..0.05))));
                }
            }
            let t = RigidTransform::from_axis_angle(&axis, angle, Vector3::from(shift));
            let base = &evaluate(&frames, &GroundTruthLog { subjects: vec![traj.clone()] }).unwrap()[0];
            let moved_traj = SubjectTrajectory {
                poses: traj.poses.iter().map(|p| p.transform(&t)).collect(),
                ..traj
            };
            let moved_frames: Vec<TrackFrame> = frames
                .iter()
                .map(|f| TrackFrame { pose: f.pose.transform(&t), ..f.clone() })
                .collect();
            let moved = &evaluate(&moved_frames, &GroundTruthLog { subjects: vec![moved_traj] }).unwrap()[0];
            prop_assert!((base.e_avg - moved.e_avg).abs() < 1e-9);
            prop_assert!((base.e_sd - moved.e_sd).abs() < 1e-9);
            prop_assert!((base.mpjpe - moved.mpjpe).abs() < 1e-9);
        }

        #[test]
        fn per_joint_diagnostic_is_permutation_covariant(seed in 0u64..1000, shift in 1usize..15) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let traj = trajectory("s", 60, 20.0, Vector3::new(0.1, 0.0, 0.0));
            let times: Vec<f64> = (0..30).map(|k| k as f64 * 0.1).collect();
            let mut frames = frames_from(&traj, 1, &times, Vector3::zeros());
            for f in &mut frames {
                for j in JointId::ALL {
                    let p = f.pose.get(j).unwrap();
                    f.pose.set(j, Some(p + Vector3::from_fn(|_, _| rng.random_range(-0.05..0.05))));
                }
            }
            let seq = align(&frames, &GroundTruthLog { subjects: vec![traj] }).unwrap().remove(0);
            let rotate = |p: &SkeletonPose| SkeletonPose { joints: std::array::from_fn(|m| p.joints[(m + shift) % 15]) };
            let permuted = AlignedSequence {
                frames: seq
                    .frames
                    .iter()
                    .map(|f| AlignedFrame { estimate: rotate(&f.estimate), truth: rotate(&f.truth), ..*f })
                    .collect(),
                ..seq.clone()
            };
            let a = displacement_metrics(&seq);
            let b = displacement_metrics(&permuted);
            for m in 0..15 {
                prop_assert!((b.per_joint[m] - a.per_joint[(m + shift) % 15]).abs() < 1e-12);
            }
            // The summed metric only sees the sums, which permutation keeps.
            prop_assert!((a.e_avg - b.e_avg).abs() < 1e-12);
            prop_assert!((a.mpjpe - b.mpjpe).abs() < 1e-12);
        }
    }
}
