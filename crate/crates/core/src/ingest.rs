//! Detection batches from asynchronous nodes, their global-frame transform,
//! and the line-delimited stream format used for offline replay.
//!
//! Each line of a stream file is one JSON object:
//!
//! ```text
//! {"camera_id":"cam0","timestamp":0.0333,"detections":[[null,{"x":0.1,"y":0.2,"z":2.9,"c":0.93}, ...]]}
//! ```
//!
//! `detections` holds one 15-element array per skeleton, in joint index
//! order; absent joints are `null`.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::sync::mpsc;

use nalgebra::Vector3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Point3, RigidTransform, SkeletonPose, NUM_JOINTS};

pub type CameraId = String;

/// Camera id → camera-to-global transform.
pub type Extrinsics = BTreeMap<CameraId, RigidTransform>;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct JointObservation {
    pub position: Point3,
    pub confidence: f64,
}

impl JointObservation {
    pub fn new(position: Point3, confidence: f64) -> Self {
        JointObservation {
            position,
            confidence,
        }
    }
}

/// One skeleton seen by one node at one instant.
#[derive(Debug, Clone, PartialEq)]
pub struct SkeletonDetection {
    pub camera_id: CameraId,
    pub timestamp: f64,
    pub joints: [Option<JointObservation>; NUM_JOINTS],
}

impl SkeletonDetection {
    pub fn validate(&self) -> Result<()> {
        if !self.timestamp.is_finite() || self.timestamp < 0.0 {
            return Err(Error::InvalidDetection(format!(
                "timestamp {} must be finite and non-negative",
                self.timestamp
            )));
        }
        if self.joints.iter().all(Option::is_none) {
            return Err(Error::InvalidDetection("no joints present".into()));
        }
        for obs in self.joints.iter().flatten() {
            if !(0.0..=1.0).contains(&obs.confidence) {
                return Err(Error::InvalidDetection(format!(
                    "confidence {} outside [0, 1]",
                    obs.confidence
                )));
            }
            if !obs.position.iter().all(|v| v.is_finite()) {
                return Err(Error::InvalidDetection("non-finite joint position".into()));
            }
        }
        Ok(())
    }

    pub fn pose(&self) -> SkeletonPose {
        SkeletonPose {
            joints: self.joints.map(|j| j.map(|o| o.position)),
        }
    }

    /// Mean of the present joints.
    pub fn centroid(&self) -> Result<Point3> {
        self.pose().centroid()
    }

    pub fn transform(&self, t: &RigidTransform) -> SkeletonDetection {
        SkeletonDetection {
            camera_id: self.camera_id.clone(),
            timestamp: self.timestamp,
            joints: self.joints.map(|j| {
                j.map(|o| JointObservation {
                    position: t.apply(&o.position),
                    confidence: o.confidence,
                })
            }),
        }
    }
}

/// Everything one node reported for one frame.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectionBatch {
    pub camera_id: CameraId,
    pub timestamp: f64,
    pub detections: Vec<SkeletonDetection>,
}

impl DetectionBatch {
    pub fn validate(&self) -> Result<()> {
        for d in &self.detections {
            if d.camera_id != self.camera_id || d.timestamp != self.timestamp {
                return Err(Error::InvalidDetection(
                    "detection does not share the batch camera id and timestamp".into(),
                ));
            }
            d.validate()?;
        }
        if !self.timestamp.is_finite() || self.timestamp < 0.0 {
            return Err(Error::InvalidDetection(format!(
                "batch timestamp {} must be finite and non-negative",
                self.timestamp
            )));
        }
        Ok(())
    }
}

/// Expresses every detection of `batch` in the global frame.
pub fn ingest_batch(batch: &DetectionBatch, extrinsics: &Extrinsics) -> Result<DetectionBatch> {
    let t = extrinsics
        .get(&batch.camera_id)
        .ok_or_else(|| Error::UncalibratedNode(batch.camera_id.clone()))?;
    Ok(DetectionBatch {
        camera_id: batch.camera_id.clone(),
        timestamp: batch.timestamp,
        detections: batch.detections.iter().map(|d| d.transform(t)).collect(),
    })
}

/// Multi-producer, single-consumer queue. Each node thread owns a sender
/// clone; the central consumer drains the receiver in arrival order, which
/// keeps every node's batches in FIFO order.
pub fn queue() -> (mpsc::Sender<DetectionBatch>, mpsc::Receiver<DetectionBatch>) {
    mpsc::channel()
}

// ---------------------------------------------------------------------------
// Stream files

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
struct JointRecord {
    x: f64,
    y: f64,
    z: f64,
    c: f64,
}

#[derive(Debug, Serialize, Deserialize)]
struct BatchRecord {
    camera_id: String,
    timestamp: f64,
    detections: Vec<Vec<Option<JointRecord>>>,
}

impl From<&DetectionBatch> for BatchRecord {
    fn from(batch: &DetectionBatch) -> Self {
        BatchRecord {
            camera_id: batch.camera_id.clone(),
            timestamp: batch.timestamp,
            detections: batch
                .detections
                .iter()
                .map(|d| {
                    d.joints
                        .iter()
                        .map(|j| {
                            j.map(|o| JointRecord {
                                x: o.position.x,
                                y: o.position.y,
                                z: o.position.z,
                                c: o.confidence,
                            })
                        })
                        .collect()
                })
                .collect(),
        }
    }
}

impl TryFrom<BatchRecord> for DetectionBatch {
    type Error = String;

    fn try_from(rec: BatchRecord) -> std::result::Result<Self, String> {
        let mut detections = Vec::with_capacity(rec.detections.len());
        for (i, joints) in rec.detections.into_iter().enumerate() {
            if joints.len() != NUM_JOINTS {
                return Err(format!(
                    "detection {i} has {} joints, expected {NUM_JOINTS}",
                    joints.len()
                ));
            }
            let mut arr = [None; NUM_JOINTS];
            for (slot, j) in arr.iter_mut().zip(joints) {
                *slot = j.map(|r| JointObservation::new(Vector3::new(r.x, r.y, r.z), r.c));
            }
            detections.push(SkeletonDetection {
                camera_id: rec.camera_id.clone(),
                timestamp: rec.timestamp,
                joints: arr,
            });
        }
        let batch = DetectionBatch {
            camera_id: rec.camera_id,
            timestamp: rec.timestamp,
            detections,
        };
        batch.validate().map_err(|e| e.to_string())?;
        Ok(batch)
    }
}

pub fn encode_batch(batch: &DetectionBatch) -> String {
    serde_json::to_string(&BatchRecord::from(batch)).expect("batch records always serialize")
}

pub fn write_stream<W: Write>(mut out: W, batches: &[DetectionBatch]) -> std::io::Result<()> {
    for b in batches {
        out.write_all(encode_batch(b).as_bytes())?;
        out.write_all(b"\n")?;
    }
    out.flush()
}

pub fn write_stream_file(path: &Path, batches: &[DetectionBatch]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    write_stream(BufWriter::new(file), batches).map_err(|e| Error::io(path, e))
}

/// Parses a stream; `origin` names the source in error messages. Blank lines
/// are skipped.
pub fn read_stream<R: BufRead>(reader: R, origin: &str) -> Result<Vec<DetectionBatch>> {
    let mut batches = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(|e| Error::Format {
            path: origin.to_string(),
            line: line_no,
            reason: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: BatchRecord = serde_json::from_str(&line).map_err(|e| Error::Format {
            path: origin.to_string(),
            line: line_no,
            reason: e.to_string(),
        })?;
        let batch = DetectionBatch::try_from(rec).map_err(|reason| Error::Format {
            path: origin.to_string(),
            line: line_no,
            reason,
        })?;
        batches.push(batch);
    }
    Ok(batches)
}

pub fn read_stream_file(path: &Path) -> Result<Vec<DetectionBatch>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_stream(BufReader::new(file), &path.display().to_string())
}

// ---------------------------------------------------------------------------
// Replay ordering

/// Merges per-node streams into timestamp order. Ties keep the order of
/// `streams`, and each node's own order is preserved.
pub fn merge_by_timestamp(streams: Vec<Vec<DetectionBatch>>) -> Vec<DetectionBatch> {
    let mut tagged: Vec<(f64, usize, usize, DetectionBatch)> = streams
        .into_iter()
        .enumerate()
        .flat_map(|(node, s)| {
            s.into_iter()
                .enumerate()
                .map(move |(k, b)| (b.timestamp, node, k, b))
        })
        .collect();
    tagged.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    tagged.into_iter().map(|(_, _, _, b)| b).collect()
}

/// Simulated network arrival order: each batch arrives after a random
/// latency |N(0, latency_sd)|, never overtaking an earlier batch of the same
/// node.
pub fn merge_with_arrival_jitter(
    streams: Vec<Vec<DetectionBatch>>,
    latency_sd: f64,
    seed: u64,
) -> Vec<DetectionBatch> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, latency_sd.max(0.0)).expect("finite latency");
    let mut tagged = Vec::new();
    for (node, stream) in streams.into_iter().enumerate() {
        let mut last_arrival = f64::NEG_INFINITY;
        for (k, batch) in stream.into_iter().enumerate() {
            let arrival = (batch.timestamp + normal.sample(&mut rng).abs()).max(last_arrival);
            last_arrival = arrival;
            tagged.push((arrival, node, k, batch));
        }
    }
    tagged.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    tagged.into_iter().map(|(_, _, _, b)| b).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::JointId;
    use approx::assert_abs_diff_eq;

    fn detection(cam: &str, t: f64, pts: &[(JointId, Point3, f64)]) -> SkeletonDetection {
        let mut joints = [None; NUM_JOINTS];
        for (j, p, c) in pts {
            joints[j.index()] = Some(JointObservation::new(*p, *c));
        }
        SkeletonDetection {
            camera_id: cam.into(),
            timestamp: t,
            joints,
        }
    }

    fn batch(cam: &str, t: f64, n: usize) -> DetectionBatch {
        DetectionBatch {
            camera_id: cam.into(),
            timestamp: t,
            detections: (0..n)
                .map(|i| {
                    detection(
                        cam,
                        t,
                        &[(JointId::Neck, Vector3::new(i as f64, 1.0, 1.5), 0.9)],
                    )
                })
                .collect(),
        }
    }

    #[test]
    fn identity_extrinsic_leaves_batch_unchanged() {
        let b = batch("a", 0.5, 2);
        let ext = Extrinsics::from([("a".to_string(), RigidTransform::identity())]);
        assert_eq!(ingest_batch(&b, &ext).unwrap(), b);
    }

    #[test]
    fn translated_node_shifts_joints() {
        let b = batch("a", 0.5, 1);
        let ext = Extrinsics::from([(
            "a".to_string(),
            RigidTransform::from_translation(Vector3::new(0.0, 0.0, 2.0)),
        )]);
        let out = ingest_batch(&b, &ext).unwrap();
        let obs = out.detections[0].joints[JointId::Neck.index()].unwrap();
        assert_abs_diff_eq!(obs.position, Vector3::new(0.0, 1.0, 3.5), epsilon = 1e-15);
        assert_eq!(obs.confidence, 0.9);
        assert_eq!(out.timestamp, 0.5);
    }

    #[test]
    fn unknown_camera_is_uncalibrated() {
        let err = ingest_batch(&batch("ghost", 0.0, 1), &Extrinsics::new()).unwrap_err();
        assert!(matches!(err, Error::UncalibratedNode(ref id) if id == "ghost"));
        assert!(err.to_string().contains("uncalibrated node"));
    }

    #[test]
    fn two_nodes_agree_on_a_noiseless_point() {
        // Ground truth in global frame, observed by two differently posed nodes.
        let truth = Vector3::new(0.3, -0.2, 1.1);
        let t_a = RigidTransform::look_at(&Vector3::new(3.0, 3.0, 2.5), &Vector3::zeros(), &Vector3::z()).unwrap();
        let t_b = RigidTransform::look_at(&Vector3::new(-3.0, 3.0, 2.5), &Vector3::zeros(), &Vector3::z()).unwrap();
        let ext = Extrinsics::from([("a".to_string(), t_a), ("b".to_string(), t_b)]);
        let in_a = t_a.inverse().apply(&truth);
        let in_b = t_b.inverse().apply(&truth);
        let ba = DetectionBatch {
            camera_id: "a".into(),
            timestamp: 1.0,
            detections: vec![detection("a", 1.0, &[(JointId::Head, in_a, 1.0)])],
        };
        let bb = DetectionBatch {
            camera_id: "b".into(),
            timestamp: 1.0,
            detections: vec![detection("b", 1.0, &[(JointId::Head, in_b, 1.0)])],
        };
        let ga = ingest_batch(&ba, &ext).unwrap().detections[0].joints[0].unwrap().position;
        let gb = ingest_batch(&bb, &ext).unwrap().detections[0].joints[0].unwrap().position;
        assert!((ga - gb).norm() < 1e-9);
        assert!((ga - truth).norm() < 1e-9);
    }

    #[test]
    fn validation_rejects_bad_inputs() {
        let mut d = detection("a", 0.0, &[(JointId::Head, Vector3::zeros(), 1.2)]);
        assert!(d.validate().is_err());
        d.joints[0].as_mut().unwrap().confidence = 1.0;
        assert!(d.validate().is_ok());
        d.timestamp = -1.0;
        assert!(d.validate().is_err());
        let empty = detection("a", 0.0, &[]);
        assert!(empty.validate().is_err());

        let mut b = batch("a", 1.0, 1);
        b.detections[0].timestamp = 2.0;
        assert!(b.validate().is_err());
    }

    #[test]
    fn stream_roundtrip_and_line_errors() {
        let batches = vec![batch("cam0", 0.0, 2), batch("cam0", 1.0 / 30.0, 0), batch("cam0", 2.0 / 30.0, 1)];
        let mut buf = Vec::new();
        write_stream(&mut buf, &batches).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert_eq!(text.lines().count(), 3);
        assert!(text.starts_with(r#"{"camera_id":"cam0","timestamp":0.0,"detections":[[null,{"x":0.0"#));
        let back = read_stream(buf.as_slice(), "mem").unwrap();
        assert_eq!(back, batches);

        let bad = format!("{}\n{{\"camera_id\":\"x\"}}\n", text.lines().next().unwrap());
        match read_stream(bad.as_bytes(), "bad.jsonl") {
            Err(Error::Format { line, path, .. }) => {
                assert_eq!(line, 2);
                assert_eq!(path, "bad.jsonl");
            }
            other => panic!("expected format error, got {other:?}"),
        }
        let short = r#"{"camera_id":"x","timestamp":0.0,"detections":[[null,null]]}"#;
        let err = read_stream(short.as_bytes(), "s").unwrap_err().to_string();
        assert!(err.contains("expected 15"), "{err}");
        assert!(read_stream("".as_bytes(), "e").unwrap().is_empty());
    }

    #[test]
    fn merge_orders_by_time_and_keeps_node_fifo() {
        let a: Vec<_> = (0..5).map(|k| batch("a", k as f64 * 0.033, 1)).collect();
        let b: Vec<_> = (0..5).map(|k| batch("b", 0.01 + k as f64 * 0.04, 1)).collect();
        let merged = merge_by_timestamp(vec![a.clone(), b.clone()]);
        assert_eq!(merged.len(), 10);
        assert!(merged.windows(2).all(|w| w[0].timestamp <= w[1].timestamp));

        for seed in 0..20 {
            let jittered = merge_with_arrival_jitter(vec![a.clone(), b.clone()], 0.05, seed);
            assert_eq!(jittered.len(), 10);
            for cam in ["a", "b"] {
                let ts: Vec<f64> = jittered
                    .iter()
                    .filter(|x| x.camera_id == cam)
                    .map(|x| x.timestamp)
                    .collect();
                assert!(ts.windows(2).all(|w| w[0] < w[1]), "node {cam} reordered");
            }
        }
    }

    #[test]
    fn queue_preserves_per_node_fifo_across_threads() {
        let (tx, rx) = queue();
        let handles: Vec<_> = ["a", "b", "c"]
            .into_iter()
            .map(|cam| {
                let tx = tx.clone();
                std::thread::spawn(move || {
                    for k in 0..200 {
                        tx.send(batch(cam, k as f64 * 0.01, 1)).unwrap();
                    }
                })
            })
            .collect();
        drop(tx);
        for h in handles {
            h.join().unwrap();
        }
        let received: Vec<_> = rx.iter().collect();
        assert_eq!(received.len(), 600);
        for cam in ["a", "b", "c"] {
            let ts: Vec<f64> = received
                .iter()
                .filter(|x| x.camera_id == cam)
                .map(|x| x.timestamp)
                .collect();
            assert!(ts.windows(2).all(|w| w[0] < w[1]));
        }
    }
}
