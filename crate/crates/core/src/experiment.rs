//! Benchmark matrix: scene × variant × camera count × seed.

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::eval::{align, report_rows, timing_report, ReportRow, TimingReport};
use crate::par::{self, Mode};
use crate::pipeline::{run_pipeline, BatchTiming, PipelineConfig, Replay, Variant};
use crate::sim::{generate_scene, Scene, ACCEPTANCE_PRESETS};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchSpec {
    pub scenes: Vec<String>,
    pub variants: Vec<Variant>,
    pub camera_counts: Vec<usize>,
    pub seeds: Vec<u64>,
}

impl Default for BenchSpec {
    fn default() -> Self {
        BenchSpec {
            scenes: ACCEPTANCE_PRESETS.iter().map(|s| s.to_string()).collect(),
            variants: Variant::ALL.to_vec(),
            camera_counts: vec![2, 3, 4],
            seeds: vec![1],
        }
    }
}

/// One (scene, camera count, seed) simulation evaluated under every variant.
#[derive(Debug, Clone)]
struct Job {
    scene: usize,
    cameras: usize,
    seed: u64,
}

#[derive(Debug, Clone, Default)]
pub struct BenchOutput {
    /// Sorted by scene, seed, variant, camera count, subject.
    pub rows: Vec<ReportRow>,
    pub timings: Vec<BatchTiming>,
}

impl BenchOutput {
    pub fn timing(&self) -> TimingReport {
        timing_report(&self.timings)
    }
}

#[derive(Debug, Clone)]
pub struct CellOutput {
    pub rows: Vec<ReportRow>,
    pub timings: Vec<BatchTiming>,
}

/// Runs every variant on one simulated sequence using the first `cameras`
/// nodes of `scene`.
pub fn run_cell(
    scene: &Scene,
    cfg: &PipelineConfig,
    variants: &[Variant],
    cameras: usize,
    seed: u64,
) -> Result<CellOutput> {
    let sub = scene.with_cameras(cameras)?;
    let sim = generate_scene(&sub, seed);
    let extrinsics = sub.extrinsics();
    let mut rows = Vec::new();
    let mut timings = Vec::new();
    for &variant in variants {
        let run = run_pipeline(cfg, variant, &extrinsics, sim.streams.clone(), Replay::Merged)?;
        let aligned = align(&run.frames, &sim.truth)?;
        rows.extend(report_rows(&scene.name, seed, variant, cameras, &aligned));
        timings.extend(run.timings);
    }
    Ok(CellOutput { rows, timings })
}

pub fn run_bench(spec: &BenchSpec, cfg: &PipelineConfig, mode: Mode) -> Result<BenchOutput> {
    let scenes = spec
        .scenes
        .iter()
        .map(|s| Scene::resolve(s))
        .collect::<Result<Vec<_>>>()?;
    let mut jobs = Vec::new();
    for (i, _) in scenes.iter().enumerate() {
        for &seed in &spec.seeds {
            for &cameras in &spec.camera_counts {
                jobs.push(Job { scene: i, cameras, seed });
            }
        }
    }
    let results = par::map_with(mode, &jobs, |job| {
        run_cell(&scenes[job.scene], cfg, &spec.variants, job.cameras, job.seed)
    });
    let mut out = BenchOutput::default();
    for (job, result) in jobs.iter().zip(results) {
        let cell = result?;
        log::debug!("{} cameras={} seed={}: {} rows", scenes[job.scene].name, job.cameras, job.seed, cell.rows.len());
        out.rows.extend(cell.rows);
        out.timings.extend(cell.timings);
    }
    let order = |v: &str| Variant::ALL.iter().position(|x| x.name() == v);
    let scene_pos = |s: &str| scenes.iter().position(|sc| sc.name == s);
    out.rows.sort_by(|a, b| {
        (scene_pos(&a.sequence), a.seed, order(&a.variant), a.camera_count, &a.subject).cmp(&(
            scene_pos(&b.sequence),
            b.seed,
            order(&b.variant),
            b.camera_count,
            &b.subject,
        ))
    });
    Ok(out)
}
