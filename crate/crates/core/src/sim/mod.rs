//! Synthetic scenes: scripted subjects observed by simulated camera nodes.

pub mod camera;
pub mod motion;

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::{write_stream_file, DetectionBatch, Extrinsics};
use crate::model::{JointId, Point3, RigidTransform, SkeletonPose, NUM_JOINTS};
use crate::par;

pub use camera::{preset_reference_layout, BodySide, CameraNode, CornerLayout, OcclusionSector, SensorModel, Snapshot};
pub use motion::{square_loop, MotionScript, Oscillation, Subject};

pub const DEFAULT_TRUTH_RATE_HZ: f64 = 100.0;
pub const TRUTH_FILE: &str = "truth.csv";
pub const EXTRINSICS_FILE: &str = "extrinsics.json";

fn default_scale() -> f64 {
    1.0
}

fn default_truth_rate() -> f64 {
    DEFAULT_TRUTH_RATE_HZ
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SubjectSpec {
    pub id: String,
    #[serde(default = "default_scale")]
    pub scale: f64,
    /// Oscillation phase offset (rad).
    #[serde(default)]
    pub phase: f64,
    pub motion: MotionScript,
}

/// Explicitly placed node looking from `position` at `target`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NodeSpec {
    pub camera_id: String,
    pub position: [f64; 3],
    pub target: [f64; 3],
    pub frame_rate: f64,
    #[serde(default)]
    pub clock_offset: f64,
    /// Overrides the scene-wide sensor model.
    #[serde(default)]
    pub sensor: Option<SensorModel>,
}

/// Scene file contents.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneConfig {
    #[serde(default)]
    pub name: String,
    pub duration_s: f64,
    #[serde(default = "default_truth_rate")]
    pub truth_rate_hz: f64,
    /// Sensor model for layout nodes and nodes without their own.
    #[serde(default)]
    pub sensor: SensorModel,
    #[serde(default)]
    pub layout: Option<CornerLayout>,
    #[serde(default)]
    pub nodes: Vec<NodeSpec>,
    pub subjects: Vec<SubjectSpec>,
}

impl SceneConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }
}

/// Validated, ready-to-run scene.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub name: String,
    pub duration: f64,
    pub truth_rate: f64,
    pub subjects: Vec<Subject>,
    pub nodes: Vec<CameraNode>,
}

impl Scene {
    pub fn from_config(cfg: &SceneConfig) -> Result<Self> {
        if !(cfg.duration_s > 0.0 && cfg.duration_s.is_finite()) {
            return Err(Error::Config("duration_s must be positive".into()));
        }
        if !(cfg.truth_rate_hz > 0.0 && cfg.truth_rate_hz.is_finite()) {
            return Err(Error::Config("truth_rate_hz must be positive".into()));
        }
        cfg.sensor.validate()?;
        let mut nodes = match &cfg.layout {
            Some(layout) => layout.nodes(&cfg.sensor)?,
            None => Vec::new(),
        };
        for spec in &cfg.nodes {
            let node = CameraNode {
                camera_id: spec.camera_id.clone(),
                extrinsic: RigidTransform::look_at(
                    &Point3::from(spec.position),
                    &Point3::from(spec.target),
                    &Point3::z(),
                )?,
                frame_rate: spec.frame_rate,
                clock_offset: spec.clock_offset,
                sensor: spec.sensor.clone().unwrap_or_else(|| cfg.sensor.clone()),
            };
            node.validate()?;
            nodes.push(node);
        }
        if nodes.is_empty() {
            return Err(Error::Config("scene has no nodes (set `layout` or `nodes`)".into()));
        }
        let mut ids = std::collections::BTreeSet::new();
        for n in &nodes {
            if !ids.insert(n.camera_id.as_str()) {
                return Err(Error::Config(format!("duplicate camera_id `{}`", n.camera_id)));
            }
        }
        if cfg.subjects.is_empty() {
            return Err(Error::Config("scene has no subjects".into()));
        }
        let mut subject_ids = std::collections::BTreeSet::new();
        let mut subjects = Vec::with_capacity(cfg.subjects.len());
        for s in &cfg.subjects {
            if s.id.is_empty() || s.id.contains(',') || !subject_ids.insert(s.id.as_str()) {
                return Err(Error::Config(format!("subject id `{}` is empty, duplicated or contains a comma", s.id)));
            }
            subjects.push(Subject::new(s.id.clone(), s.scale, s.motion.clone(), s.phase)?);
        }
        Ok(Scene {
            name: cfg.name.clone(),
            duration: cfg.duration_s,
            truth_rate: cfg.truth_rate_hz,
            subjects,
            nodes,
        })
    }

    /// Preset name or path to a scene file.
    pub fn resolve(name_or_path: &str) -> Result<Self> {
        let path = Path::new(name_or_path);
        let cfg = if path.exists() {
            SceneConfig::load(path)?
        } else if let Some(cfg) = preset(name_or_path) {
            cfg
        } else {
            return Err(Error::Config(format!(
                "`{name_or_path}` is neither a scene file nor a preset ({})",
                PRESET_NAMES.join(", ")
            )));
        };
        Self::from_config(&cfg)
    }

    /// Keeps the first `count` nodes.
    pub fn with_cameras(&self, count: usize) -> Result<Self> {
        if count == 0 || count > self.nodes.len() {
            return Err(Error::Config(format!(
                "camera count {count} outside 1..={}",
                self.nodes.len()
            )));
        }
        let mut scene = self.clone();
        scene.nodes.truncate(count);
        Ok(scene)
    }

    pub fn extrinsics(&self) -> Extrinsics {
        self.nodes.iter().map(|n| (n.camera_id.clone(), n.extrinsic)).collect()
    }

    pub fn snapshots(&self, t: f64) -> Vec<Snapshot> {
        self.subjects
            .iter()
            .map(|s| Snapshot {
                pose: s.pose_at(t),
                heading: s.heading_at(t),
            })
            .collect()
    }
}

/// One subject's reference trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct SubjectTrajectory {
    pub subject_id: String,
    pub timestamps: Vec<f64>,
    pub poses: Vec<SkeletonPose>,
}

/// Reference poses of every subject at a fixed rate.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct GroundTruthLog {
    pub subjects: Vec<SubjectTrajectory>,
}

impl GroundTruthLog {
    pub fn sample(scene: &Scene) -> Self {
        let count = (scene.duration * scene.truth_rate).floor() as usize + 1;
        let timestamps: Vec<f64> = (0..count).map(|k| k as f64 / scene.truth_rate).collect();
        let subjects = scene
            .subjects
            .iter()
            .map(|s| SubjectTrajectory {
                subject_id: s.id.clone(),
                poses: timestamps.iter().map(|t| s.pose_at(*t)).collect(),
                timestamps: timestamps.clone(),
            })
            .collect();
        GroundTruthLog { subjects }
    }

    pub fn subject(&self, id: &str) -> Option<&SubjectTrajectory> {
        self.subjects.iter().find(|s| s.subject_id == id)
    }

    pub fn write<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(truth_header())?;
        for s in &self.subjects {
            for (t, pose) in s.timestamps.iter().zip(&s.poses) {
                let mut row = vec![t.to_string(), s.subject_id.clone()];
                for j in JointId::ALL {
                    let p = pose.get(j).ok_or_else(|| {
                        Error::InvalidDetection(format!("truth pose for `{}` lacks {j}", s.subject_id))
                    })?;
                    row.extend([p.x.to_string(), p.y.to_string(), p.z.to_string()]);
                }
                w.write_record(&row)?;
            }
        }
        w.flush().map_err(|e| Error::io(Path::new("<truth>"), e))?;
        Ok(())
    }

    pub fn write_file(&self, path: &Path) -> Result<()> {
        let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write(std::io::BufWriter::new(file))
    }

    pub fn read<R: Read>(input: R, origin: &str) -> Result<Self> {
        let mut r = csv::Reader::from_reader(input);
        let header = r.headers()?.clone();
        if header.iter().ne(truth_header().iter().map(String::as_str)) {
            return Err(Error::Format {
                path: origin.into(),
                line: 1,
                reason: "unexpected truth header".into(),
            });
        }
        let mut by_subject: BTreeMap<String, SubjectTrajectory> = BTreeMap::new();
        let mut order = Vec::new();
        for (i, record) in r.records().enumerate() {
            let record = record?;
            let line = i + 2;
            let fail = |reason: String| Error::Format {
                path: origin.into(),
                line,
                reason,
            };
            let num = |k: usize| -> Result<f64> {
                record[k]
                    .parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| fail(format!("column {} is not a finite number", k + 1)))
            };
            let t = num(0)?;
            let id = record[1].to_string();
            let mut points = [Point3::zeros(); NUM_JOINTS];
            for (j, p) in points.iter_mut().enumerate() {
                *p = Point3::new(num(2 + 3 * j)?, num(3 + 3 * j)?, num(4 + 3 * j)?);
            }
            let entry = by_subject.entry(id.clone()).or_insert_with(|| {
                order.push(id.clone());
                SubjectTrajectory {
                    subject_id: id.clone(),
                    timestamps: Vec::new(),
                    poses: Vec::new(),
                }
            });
            if entry.timestamps.last().is_some_and(|last| *last >= t) {
                return Err(fail(format!("timestamps for `{id}` are not increasing")));
            }
            entry.timestamps.push(t);
            entry.poses.push(SkeletonPose::from_points(points));
        }
        Ok(GroundTruthLog {
            subjects: order.into_iter().map(|id| by_subject.remove(&id).unwrap()).collect(),
        })
    }

    pub fn read_file(path: &Path) -> Result<Self> {
        let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read(std::io::BufReader::new(file), &path.display().to_string())
    }
}

fn truth_header() -> Vec<String> {
    let mut h = vec!["timestamp".to_string(), "subject_id".to_string()];
    for j in JointId::ALL {
        for axis in ["x", "y", "z"] {
            h.push(format!("{}_{axis}", j.name()));
        }
    }
    h
}

/// Everything a scene run produces.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneOutput {
    pub truth: GroundTruthLog,
    /// Per node, aligned with `Scene::nodes`; detections in camera frames.
    pub streams: Vec<Vec<DetectionBatch>>,
}

/// Per-node generator. Node i draws from its own ChaCha stream, so a node's
/// output does not depend on which other nodes are simulated.
pub fn node_stream(scene: &Scene, node_index: usize, seed: u64) -> Vec<DetectionBatch> {
    let node = &scene.nodes[node_index];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(node_stream_id(&node.camera_id));
    node.capture_times(scene.duration)
        .into_iter()
        .map(|t| node.observe(t, &scene.snapshots(t), &mut rng))
        .collect()
}

/// Stable stream id from the camera name (FNV-1a).
fn node_stream_id(camera_id: &str) -> u64 {
    camera_id
        .bytes()
        .fold(0xcbf29ce484222325u64, |h, b| (h ^ b as u64).wrapping_mul(0x100000001b3))
}

pub fn generate_scene(scene: &Scene, seed: u64) -> SceneOutput {
    generate_scene_with(scene, seed, par::Mode::DEFAULT)
}

pub fn generate_scene_with(scene: &Scene, seed: u64, mode: par::Mode) -> SceneOutput {
    let indices: Vec<usize> = (0..scene.nodes.len()).collect();
    let streams = par::map_with(mode, &indices, |&i| node_stream(scene, i, seed));
    SceneOutput {
        truth: GroundTruthLog::sample(scene),
        streams,
    }
}

pub fn stream_file_name(camera_id: &str) -> String {
    format!("{camera_id}.jsonl")
}

/// Writes one stream per node, the truth log and the extrinsics. Returns
/// the written paths.
pub fn write_scene(dir: &Path, scene: &Scene, output: &SceneOutput) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut written = Vec::new();
    for (node, stream) in scene.nodes.iter().zip(&output.streams) {
        let path = dir.join(stream_file_name(&node.camera_id));
        write_stream_file(&path, stream)?;
        written.push(path);
    }
    let truth = dir.join(TRUTH_FILE);
    output.truth.write_file(&truth)?;
    written.push(truth);
    let extrinsics = dir.join(EXTRINSICS_FILE);
    write_extrinsics(&extrinsics, &scene.extrinsics())?;
    written.push(extrinsics);
    Ok(written)
}

pub fn write_extrinsics(path: &Path, extrinsics: &Extrinsics) -> Result<()> {
    let text = serde_json::to_string_pretty(extrinsics).expect("transforms serialize");
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

pub fn read_extrinsics(path: &Path) -> Result<Extrinsics> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Format {
        path: path.display().to_string(),
        line: e.line(),
        reason: e.to_string(),
    })
}

/// Built-in scenes.
pub const PRESET_NAMES: [&str; 8] = [
    "sway-1",
    "sway-2",
    "walk-slow-1",
    "walk-fast-1",
    "walk-slow-2",
    "walk-fast-2",
    "paper-layout-2walkers",
    "static-1",
];

/// The six sequences of the acceptance table.
pub const ACCEPTANCE_PRESETS: [&str; 6] = [
    "sway-1",
    "sway-2",
    "walk-slow-1",
    "walk-fast-1",
    "walk-slow-2",
    "walk-fast-2",
];

pub const SLOW_WALK: f64 = 0.5;
pub const FAST_WALK: f64 = 1.5;

pub fn preset(name: &str) -> Option<SceneConfig> {
    let osc = |amplitude_m, frequency_hz| Oscillation {
        amplitude_m,
        frequency_hz,
    };
    let sway = |position: [f64; 2], heading_deg: f64| MotionScript::Oscillate {
        position,
        heading_deg,
        arms: osc(0.25, 0.5),
        legs: osc(0.10, 0.3),
        sway: osc(0.08, 0.25),
    };
    let walk = |speed: f64, start_offset_m: f64| MotionScript::Walk {
        waypoints: square_loop([0.0, 0.0], 4.0),
        speed,
        start_offset_m,
    };
    let subject = |id: &str, scale: f64, motion| SubjectSpec {
        id: id.into(),
        scale,
        phase: 0.0,
        motion,
    };
    let subjects = match name {
        "sway-1" => vec![subject("s1", 1.0, sway([0.3, -0.2], 20.0))],
        "sway-2" => vec![
            subject("s1", 1.0, sway([-0.9, 0.4], 0.0)),
            subject("s2", 0.93, sway([0.9, -0.4], 180.0)),
        ],
        "walk-slow-1" => vec![subject("s1", 1.0, walk(SLOW_WALK, 0.0))],
        "walk-fast-1" => vec![subject("s1", 1.0, walk(FAST_WALK, 0.0))],
        "walk-slow-2" => vec![
            subject("s1", 1.0, walk(SLOW_WALK, 0.0)),
            subject("s2", 0.93, walk(SLOW_WALK, 8.0)),
        ],
        "walk-fast-2" => vec![
            subject("s1", 1.0, walk(FAST_WALK, 0.0)),
            subject("s2", 0.93, walk(FAST_WALK, 8.0)),
        ],
        "paper-layout-2walkers" => vec![
            subject("s1", 1.0, walk(1.0, 0.0)),
            subject(
                "s2",
                0.93,
                MotionScript::Walk {
                    waypoints: square_loop([0.0, 0.0], 2.0),
                    speed: 0.6,
                    start_offset_m: 4.0,
                },
            ),
        ],
        "static-1" => vec![subject(
            "s1",
            1.0,
            MotionScript::Static {
                position: [0.2, 0.1],
                heading_deg: 30.0,
            },
        )],
        _ => return None,
    };
    let duration_s = match name {
        "static-1" => 10.0,
        "paper-layout-2walkers" => 30.0,
        _ => 20.0,
    };
    Some(SceneConfig {
        name: name.into(),
        duration_s,
        truth_rate_hz: DEFAULT_TRUTH_RATE_HZ,
        sensor: SensorModel::default(),
        layout: Some(CornerLayout::default()),
        nodes: Vec::new(),
        subjects,
    })
}
