//! Command implementations behind the `skelfuse` binary.

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::eval::{align, report_rows, write_report_file, ReportRow};
use crate::experiment::{run_bench, BenchOutput, BenchSpec};
use crate::ingest::read_stream_file;
use crate::par::Mode;
use crate::pipeline::{read_track_frames_file, run_pipeline, write_track_frames_file, PipelineConfig, Replay, Variant};
use crate::sim::{generate_scene, read_extrinsics, write_scene, GroundTruthLog, Scene, EXTRINSICS_FILE};

pub const REPORT_FILE: &str = "report.csv";
pub const TIMING_FILE: &str = "timing.csv";

pub fn load_config(path: Option<&Path>) -> Result<PipelineConfig> {
    match path {
        Some(p) => PipelineConfig::load(p),
        None => Ok(PipelineConfig::default()),
    }
}

/// Simulates `scene` (preset name or file) and writes streams, truth and
/// extrinsics into `out`.
pub fn cmd_simulate(scene: &str, seed: u64, cameras: Option<usize>, out: &Path) -> Result<Vec<PathBuf>> {
    let mut scene = Scene::resolve(scene)?;
    if let Some(k) = cameras {
        scene = scene.with_cameras(k)?;
    }
    let output = generate_scene(&scene, seed);
    write_scene(out, &scene, &output)
}

/// Every `*.jsonl` file in `dir`, sorted by name.
pub fn stream_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut files = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.extension().is_some_and(|x| x == "jsonl") {
            files.push(path);
        }
    }
    files.sort();
    Ok(files)
}

#[derive(Debug, Clone)]
pub struct TrackArgs {
    pub streams: Vec<PathBuf>,
    pub extrinsics: PathBuf,
    pub config: PipelineConfig,
    pub variant: Variant,
    pub replay: Replay,
    pub out: PathBuf,
}

/// Runs the tracker over the streams; returns the number of frames written.
pub fn cmd_track(args: &TrackArgs) -> Result<usize> {
    let extrinsics = read_extrinsics(&args.extrinsics)?;
    let streams = args
        .streams
        .iter()
        .map(|p| read_stream_file(p))
        .collect::<Result<Vec<_>>>()?;
    let run = run_pipeline(&args.config, args.variant, &extrinsics, streams, args.replay)?;
    write_track_frames_file(&args.out, &run.frames)?;
    Ok(run.frames.len())
}

/// Stream files and extrinsics of a `simulate` output directory.
pub fn track_inputs(dir: &Path) -> Result<(Vec<PathBuf>, PathBuf)> {
    Ok((stream_files(dir)?, dir.join(EXTRINSICS_FILE)))
}

/// Labels copied into each report row.
#[derive(Debug, Clone)]
pub struct ReportLabels {
    pub sequence: String,
    pub seed: u64,
    pub variant: Variant,
    pub camera_count: usize,
}

pub fn cmd_evaluate(tracks: &Path, truth: &Path, labels: &ReportLabels, out: &Path) -> Result<Vec<ReportRow>> {
    let frames = read_track_frames_file(tracks)?;
    let truth = GroundTruthLog::read_file(truth)?;
    let aligned = align(&frames, &truth)?;
    let rows = report_rows(&labels.sequence, labels.seed, labels.variant, labels.camera_count, &aligned);
    write_report_file(out, &rows)?;
    Ok(rows)
}

/// Runs the benchmark matrix and writes `report.csv` (deterministic) and
/// `timing.csv` (wall clock) into `out`.
pub fn cmd_bench(spec: &BenchSpec, cfg: &PipelineConfig, mode: Mode, out: &Path) -> Result<BenchOutput> {
    let result = run_bench(spec, cfg, mode)?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    write_report_file(&out.join(REPORT_FILE), &result.rows)?;
    let timing_path = out.join(TIMING_FILE);
    let file = fs::File::create(&timing_path).map_err(|e| Error::io(&timing_path, e))?;
    result
        .timing()
        .write(std::io::BufWriter::new(file))
        .map_err(|e| Error::io(&timing_path, e))?;
    Ok(result)
}
