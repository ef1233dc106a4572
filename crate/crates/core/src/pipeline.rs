//! Central processing: association, per-track fusion and refinement.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::association::{solve_assignment, AssociationConfig, CentroidFilter, CostMatrix};
use crate::consistency::{enforce_consistency, ConsistencyConfig, LimbLengths};
use crate::error::{Error, Result};
use crate::eval::MovingAverage;
use crate::fusion::{calibrate_sigma_r, FusionConfig, JointStatus, TrackState};
use crate::ingest::{
    ingest_batch, merge_by_timestamp, merge_with_arrival_jitter, read_stream_file, DetectionBatch, Extrinsics,
    SkeletonDetection,
};
use crate::model::{BodyModel, JointId, Point3, SkeletonPose, NUM_JOINTS};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BaselineConfig {
    /// Moving-average window (frames) of the `maf` variant.
    pub maf_window: usize,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        BaselineConfig { maf_window: 5 }
    }
}

/// Every tunable of the pipeline, one TOML section per stage.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub association: AssociationConfig,
    pub fusion: FusionConfig,
    pub consistency: ConsistencyConfig,
    pub baseline: BaselineConfig,
}

impl PipelineConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Loads a config file; `fusion.calibrate_from` is resolved relative to
    /// the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })?;
        cfg.calibrate(path.parent().unwrap_or(Path::new(".")))?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.association.validate()?;
        self.fusion.validate()?;
        self.consistency.validate()?;
        if self.baseline.maf_window == 0 {
            return Err(Error::Config("baseline.maf_window must be at least 1".into()));
        }
        Ok(())
    }

    /// Replaces σ²_r with the estimate from `fusion.calibrate_from`, a
    /// detection stream of one static subject.
    pub fn calibrate(&mut self, base: &Path) -> Result<()> {
        let Some(file) = &self.fusion.calibrate_from else {
            return Ok(());
        };
        let batches = read_stream_file(&base.join(file))?;
        let detections: Vec<SkeletonDetection> = batches.into_iter().flat_map(|b| b.detections).collect();
        self.fusion.sigma_r2 = calibrate_sigma_r(&detections)?;
        log::info!("calibrated sigma_r2 = {:.3e} from {file}", self.fusion.sigma_r2);
        Ok(())
    }
}

/// Pipeline variant: ablations of the full pipeline plus the baselines.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    Full,
    NoConsistency,
    NoOutlier,
    NoConfidence,
    Maf,
    Raw,
}

impl Variant {
    pub const ALL: [Variant; 6] = [
        Variant::Full,
        Variant::NoConsistency,
        Variant::NoOutlier,
        Variant::NoConfidence,
        Variant::Maf,
        Variant::Raw,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoConsistency => "no-consistency",
            Variant::NoOutlier => "no-outlier",
            Variant::NoConfidence => "no-confidence",
            Variant::Maf => "maf",
            Variant::Raw => "raw",
        }
    }

    fn uses_kalman(self) -> bool {
        !matches!(self, Variant::Maf | Variant::Raw)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| {
                let names: Vec<_> = Variant::ALL.iter().map(|v| v.name()).collect();
                Error::Config(format!("unknown variant `{s}` (expected one of {})", names.join(", ")))
            })
    }
}

/// One output estimate of one track.
#[derive(Debug, Clone, PartialEq)]
pub struct TrackFrame {
    pub timestamp: f64,
    pub track_id: u64,
    pub pose: SkeletonPose,
    /// Estimate before limb-length refinement; equals `pose` for variants
    /// without it.
    pub fused: SkeletonPose,
    pub status: [JointStatus; NUM_JOINTS],
}

/// Wall time of one batch, by stage (s).
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct BatchTiming {
    pub timestamp: f64,
    pub detections: usize,
    pub tracks: usize,
    pub association: f64,
    pub fusion: f64,
    pub consistency: f64,
    pub other: f64,
    pub total: f64,
}

enum Estimator {
    Kalman {
        state: Box<TrackState>,
        lengths: LimbLengths,
    },
    Average(Box<MovingAverage>),
}

struct Track {
    id: u64,
    centroid: CentroidFilter,
    estimator: Estimator,
    last_seen: f64,
}

/// Stateful multi-person tracker consuming batches in arrival order.
pub struct Tracker {
    cfg: PipelineConfig,
    variant: Variant,
    model: BodyModel,
    extrinsics: Extrinsics,
    tracks: Vec<Track>,
    next_id: u64,
    timings: Vec<BatchTiming>,
}

impl Tracker {
    pub fn new(cfg: &PipelineConfig, variant: Variant, extrinsics: Extrinsics) -> Result<Self> {
        cfg.validate()?;
        let mut cfg = cfg.clone();
        match variant {
            Variant::NoConsistency => cfg.consistency.enabled = false,
            Variant::NoOutlier => cfg.fusion.outlier_filtering = false,
            Variant::NoConfidence => cfg.fusion.confidence_feedback = false,
            _ => {}
        }
        Ok(Tracker {
            cfg,
            variant,
            model: BodyModel::standard(),
            extrinsics,
            tracks: Vec::new(),
            next_id: 1,
            timings: Vec::new(),
        })
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.cfg
    }

    pub fn live_tracks(&self) -> Vec<u64> {
        self.tracks.iter().map(|t| t.id).collect()
    }

    pub fn timings(&self) -> &[BatchTiming] {
        &self.timings
    }

    /// Processes one batch and returns the updated estimates, by track id.
    pub fn process(&mut self, batch: &DetectionBatch) -> Result<Vec<TrackFrame>> {
        let start = Instant::now();
        let global = ingest_batch(batch, &self.extrinsics)?;
        let t = global.timestamp;
        let timeout = self.cfg.association.track_timeout_s;
        self.tracks.retain(|track| {
            let keep = t - track.last_seen <= timeout;
            if !keep {
                log::debug!("track {} timed out at {t:.3}", track.id);
            }
            keep
        });
        let centroids = global
            .detections
            .iter()
            .map(SkeletonDetection::centroid)
            .collect::<Result<Vec<Point3>>>()?;

        let assoc_start = Instant::now();
        let a_cfg = &self.cfg.association;
        let mut costs = Vec::with_capacity(centroids.len() * self.tracks.len());
        for track in &self.tracks {
            for c in &centroids {
                costs.push(track.centroid.association_cost(c, t, a_cfg)?);
            }
        }
        let matrix = CostMatrix::new(self.tracks.len(), centroids.len(), costs)?;
        let assignment = solve_assignment(&matrix, a_cfg.gate_epsilon);
        for &(k, d) in &assignment.pairs {
            self.tracks[k].centroid.update(&centroids[d], t, a_cfg)?;
            self.tracks[k].last_seen = self.tracks[k].last_seen.max(t);
        }
        let mut association = assoc_start.elapsed().as_secs_f64();

        let mut fusion = 0.0;
        let mut consistency = 0.0;
        let mut frames = Vec::with_capacity(global.detections.len());
        for &(k, d) in &assignment.pairs {
            let (frame, f, c) = self.update_track(k, &global.detections[d])?;
            fusion += f;
            consistency += c;
            frames.push(frame);
        }
        for &d in &assignment.unmatched_detections {
            let create = Instant::now();
            let detection = &global.detections[d];
            let id = self.next_id;
            self.next_id += 1;
            log::debug!("track {id} created at {t:.3}");
            let centroid = CentroidFilter::new(centroids[d], t, &self.cfg.association);
            association += create.elapsed().as_secs_f64();
            let fuse = Instant::now();
            let estimator = if self.variant.uses_kalman() {
                Estimator::Kalman {
                    state: Box::new(TrackState::from_detection(id, detection, &self.cfg.fusion)?),
                    lengths: LimbLengths::new(&self.model, self.cfg.consistency.init_frames),
                }
            } else {
                Estimator::Average(Box::new(MovingAverage::new(self.average_window())))
            };
            self.tracks.push(Track {
                id,
                centroid,
                estimator,
                last_seen: t,
            });
            fusion += fuse.elapsed().as_secs_f64();
            let k = self.tracks.len() - 1;
            frames.push(self.initial_frame(k, detection, t)?);
        }
        frames.sort_by_key(|f| f.track_id);

        let total = start.elapsed().as_secs_f64();
        self.timings.push(BatchTiming {
            timestamp: t,
            detections: global.detections.len(),
            tracks: self.tracks.len(),
            association,
            fusion,
            consistency,
            other: (total - association - fusion - consistency).max(0.0),
            total,
        });
        Ok(frames)
    }

    fn average_window(&self) -> usize {
        match self.variant {
            Variant::Raw => 1,
            _ => self.cfg.baseline.maf_window,
        }
    }

    fn initial_frame(&mut self, k: usize, detection: &SkeletonDetection, t: f64) -> Result<TrackFrame> {
        let track = &mut self.tracks[k];
        let (pose, status) = match &mut track.estimator {
            Estimator::Kalman { state, .. } => {
                let status = std::array::from_fn(|m| {
                    if state.monitors[m].history_len() == 0 && detection.joints[m].is_none() {
                        JointStatus::Substituted
                    } else {
                        JointStatus::Accepted
                    }
                });
                (state.pose(), status)
            }
            Estimator::Average(avg) => {
                let status = avg.push(detection)?;
                (avg.pose(), status)
            }
        };
        Ok(TrackFrame {
            timestamp: t,
            track_id: track.id,
            pose,
            fused: pose,
            status,
        })
    }

    /// Returns the frame plus fusion and consistency wall times.
    fn update_track(&mut self, k: usize, detection: &SkeletonDetection) -> Result<(TrackFrame, f64, f64)> {
        let t = detection.timestamp;
        let track = &mut self.tracks[k];
        let fuse = Instant::now();
        match &mut track.estimator {
            Estimator::Kalman { state, lengths } => {
                state.predict(t, &self.cfg.fusion);
                let report = state.update(detection, &self.cfg.fusion);
                let fused = state.pose();
                let fusion = fuse.elapsed().as_secs_f64();

                let refine = Instant::now();
                let pose = if self.cfg.consistency.enabled {
                    // Lengths learn only from frames where every joint took a
                    // real measurement.
                    if report.is_clean() {
                        if lengths.is_initialized() {
                            lengths.update(&fused, self.cfg.consistency.length_alpha);
                        } else {
                            lengths.observe(&fused);
                        }
                    }
                    enforce_consistency(&fused, lengths, &self.model, &self.cfg.consistency).0
                } else {
                    fused
                };
                let consistency = refine.elapsed().as_secs_f64();
                Ok((
                    TrackFrame {
                        timestamp: t,
                        track_id: track.id,
                        pose,
                        fused,
                        status: report.status,
                    },
                    fusion,
                    consistency,
                ))
            }
            Estimator::Average(avg) => {
                let status = avg.push(detection)?;
                let pose = avg.pose();
                Ok((
                    TrackFrame {
                        timestamp: t,
                        track_id: track.id,
                        pose,
                        fused: pose,
                        status,
                    },
                    fuse.elapsed().as_secs_f64(),
                    0.0,
                ))
            }
        }
    }
}

/// Order in which batches from several nodes reach the tracker.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Replay {
    /// Merged by capture timestamp.
    Merged,
    /// Per-node FIFO with random transport latency.
    ArrivalJitter { latency_sd: f64, seed: u64 },
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunOutput {
    pub frames: Vec<TrackFrame>,
    pub timings: Vec<BatchTiming>,
}

pub fn run_pipeline(
    cfg: &PipelineConfig,
    variant: Variant,
    extrinsics: &Extrinsics,
    streams: Vec<Vec<DetectionBatch>>,
    replay: Replay,
) -> Result<RunOutput> {
    let ordered = match replay {
        Replay::Merged => merge_by_timestamp(streams),
        Replay::ArrivalJitter { latency_sd, seed } => merge_with_arrival_jitter(streams, latency_sd, seed),
    };
    let mut tracker = Tracker::new(cfg, variant, extrinsics.clone())?;
    let mut frames = Vec::new();
    for batch in &ordered {
        frames.extend(tracker.process(batch)?);
    }
    Ok(RunOutput {
        frames,
        timings: tracker.timings,
    })
}

/// First and last timestamps and frame count of each track id.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrackSpan {
    pub first: f64,
    pub last: f64,
    pub frames: usize,
}

impl TrackSpan {
    pub fn duration(&self) -> f64 {
        self.last - self.first
    }
}

pub fn track_spans(frames: &[TrackFrame]) -> BTreeMap<u64, TrackSpan> {
    let mut spans: BTreeMap<u64, TrackSpan> = BTreeMap::new();
    for f in frames {
        spans
            .entry(f.track_id)
            .and_modify(|s| {
                s.first = s.first.min(f.timestamp);
                s.last = s.last.max(f.timestamp);
                s.frames += 1;
            })
            .or_insert(TrackSpan {
                first: f.timestamp,
                last: f.timestamp,
                frames: 1,
            });
    }
    spans
}

/// Ids of tracks lasting at least `min_duration` seconds.
pub fn long_lived_tracks(frames: &[TrackFrame], min_duration: f64) -> Vec<u64> {
    track_spans(frames)
        .into_iter()
        .filter(|(_, s)| s.duration() >= min_duration)
        .map(|(id, _)| id)
        .collect()
}

fn track_header() -> Vec<String> {
    let mut h = vec!["timestamp".to_string(), "track_id".to_string()];
    for j in JointId::ALL {
        for axis in ["x", "y", "z"] {
            h.push(format!("{}_{axis}", j.name()));
        }
    }
    h.push("status".into());
    h
}

/// Track frames as CSV: timestamp, track id, 45 coordinates (empty when a
/// joint has no estimate) and one status letter per joint.
pub fn write_track_frames<W: Write>(out: W, frames: &[TrackFrame]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(track_header())?;
    for f in frames {
        let mut row = Vec::with_capacity(48);
        row.push(f.timestamp.to_string());
        row.push(f.track_id.to_string());
        for j in JointId::ALL {
            match f.pose.get(j) {
                Some(p) => row.extend([p.x.to_string(), p.y.to_string(), p.z.to_string()]),
                None => row.extend([String::new(), String::new(), String::new()]),
            }
        }
        row.push(f.status.iter().map(|s| s.as_char()).collect());
        w.write_record(&row)?;
    }
    w.flush().map_err(|e| Error::io("<tracks>", e))?;
    Ok(())
}

pub fn write_track_frames_file(path: &Path, frames: &[TrackFrame]) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_track_frames(std::io::BufWriter::new(file), frames)
}

pub fn read_track_frames<R: Read>(input: R, origin: &str) -> Result<Vec<TrackFrame>> {
    let mut r = csv::Reader::from_reader(input);
    let header = r.headers()?.clone();
    if header.iter().ne(track_header().iter().map(String::as_str)) {
        return Err(Error::Format {
            path: origin.into(),
            line: 1,
            reason: "unexpected track-frame header".into(),
        });
    }
    let mut frames = Vec::new();
    for (i, record) in r.records().enumerate() {
        let record = record?;
        let fail = |reason: String| Error::Format {
            path: origin.into(),
            line: i + 2,
            reason,
        };
        let timestamp: f64 = record[0]
            .parse()
            .ok()
            .filter(|v: &f64| v.is_finite())
            .ok_or_else(|| fail("timestamp is not a finite number".into()))?;
        let track_id: u64 = record[1].parse().map_err(|_| fail("track_id is not an integer".into()))?;
        let mut pose = SkeletonPose::empty();
        for j in JointId::ALL {
            let base = 2 + 3 * j.index();
            let cells = [&record[base], &record[base + 1], &record[base + 2]];
            if cells.iter().all(|c| c.is_empty()) {
                continue;
            }
            let mut xyz = [0.0; 3];
            for (v, c) in xyz.iter_mut().zip(cells) {
                *v = c
                    .parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| fail(format!("{j} coordinate `{c}` is not a finite number")))?;
            }
            pose.set(j, Some(Point3::from(xyz)));
        }
        let letters: Vec<char> = record[47].chars().collect();
        if letters.len() != NUM_JOINTS {
            return Err(fail(format!("status has {} letters, expected {NUM_JOINTS}", letters.len())));
        }
        let mut status = [JointStatus::Accepted; NUM_JOINTS];
        for (s, c) in status.iter_mut().zip(letters) {
            *s = JointStatus::from_char(c).ok_or_else(|| fail(format!("unknown status letter `{c}`")))?;
        }
        frames.push(TrackFrame {
            timestamp,
            track_id,
            pose,
            fused: pose,
            status,
        });
    }
    Ok(frames)
}

pub fn read_track_frames_file(path: &Path) -> Result<Vec<TrackFrame>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_track_frames(std::io::BufReader::new(file), &path.display().to_string())
}
