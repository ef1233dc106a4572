use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};

use skelfuse::cli::{self, ReportLabels, TrackArgs};
use skelfuse::experiment::BenchSpec;
use skelfuse::par::Mode;
use skelfuse::pipeline::{Replay, Variant};
use skelfuse::sim::ACCEPTANCE_PRESETS;

/// Multi-camera skeleton tracking: simulate, track, evaluate, benchmark.
/// Log level comes from RUST_LOG.
#[derive(Parser)]
#[command(name = "skelfuse", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write detection streams, ground truth and extrinsics of a scene.
    Simulate {
        /// Preset name or scene TOML file.
        #[arg(long)]
        scene: String,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Keep only the first N camera nodes.
        #[arg(long)]
        cameras: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fuse detection streams into a track-frames CSV.
    Track {
        /// Directory written by `simulate` (all *.jsonl plus extrinsics.json).
        #[arg(long, required_unless_present = "streams")]
        input: Option<PathBuf>,
        /// Explicit stream files instead of --input.
        #[arg(long, num_args = 1.., conflicts_with = "input")]
        streams: Vec<PathBuf>,
        #[arg(long)]
        extrinsics: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value = "full")]
        variant: Variant,
        /// Replay with random per-node arrival latency of this sd (s).
        #[arg(long)]
        jitter: Option<f64>,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare a track-frames CSV against ground truth.
    Evaluate {
        #[arg(long)]
        tracks: PathBuf,
        #[arg(long)]
        truth: PathBuf,
        /// Sequence label for the report.
        #[arg(long, default_value = "unnamed")]
        scene: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "full")]
        variant: Variant,
        #[arg(long, default_value_t = 0)]
        cameras: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the scene × variant × camera count × seed matrix.
    Bench {
        /// Preset names or scene files; defaults to the six acceptance presets.
        #[arg(long)]
        scene: Vec<String>,
        #[arg(long)]
        variant: Vec<Variant>,
        #[arg(long, value_delimiter = ',', default_value = "2,3,4")]
        cameras: Vec<usize>,
        #[arg(long, value_delimiter = ',', default_value = "1")]
        seed: Vec<u64>,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Run cells one after another.
        #[arg(long)]
        sequential: bool,
        #[arg(long)]
        out: PathBuf,
    },
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Simulate { scene, seed, cameras, out } => {
            let written = cli::cmd_simulate(&scene, seed, cameras, &out)?;
            log::info!("wrote {} files to {}", written.len(), out.display());
        }
        Command::Track { input, streams, extrinsics, config, variant, jitter, seed, out } => {
            let (streams, default_extrinsics) = match input {
                Some(dir) => {
                    let (s, e) = cli::track_inputs(&dir)?;
                    (s, Some(e))
                }
                None => (streams, None),
            };
            let Some(extrinsics) = extrinsics.or(default_extrinsics) else {
                bail!("--extrinsics is required with --streams");
            };
            let replay = match jitter {
                Some(latency_sd) => Replay::ArrivalJitter { latency_sd, seed },
                None => Replay::Merged,
            };
            let args = TrackArgs {
                streams,
                extrinsics,
                config: cli::load_config(config.as_deref())?,
                variant,
                replay,
                out,
            };
            let n = cli::cmd_track(&args)?;
            log::info!("wrote {n} track frames to {}", args.out.display());
        }
        Command::Evaluate { tracks, truth, scene, seed, variant, cameras, out } => {
            let labels = ReportLabels { sequence: scene, seed, variant, camera_count: cameras };
            let rows = cli::cmd_evaluate(&tracks, &truth, &labels, &out)?;
            for r in &rows {
                println!(
                    "{}: frames {} e_avg {:.4} m e_sd {:.4} m mpjpe {:.4} m",
                    r.subject, r.frames, r.e_avg_m, r.e_sd_m, r.mpjpe_m
                );
            }
        }
        Command::Bench { scene, variant, cameras, seed, config, sequential, out } => {
            let spec = BenchSpec {
                scenes: if scene.is_empty() {
                    ACCEPTANCE_PRESETS.iter().map(|s| s.to_string()).collect()
                } else {
                    scene
                },
                variants: if variant.is_empty() { Variant::ALL.to_vec() } else { variant },
                camera_counts: cameras,
                seeds: seed,
            };
            let mode = if sequential { Mode::Sequential } else { Mode::DEFAULT };
            let cfg = cli::load_config(config.as_deref())?;
            let result = cli::cmd_bench(&spec, &cfg, mode, &out)
                .with_context(|| format!("bench into {}", out.display()))?;
            log::info!("{} report rows written to {}", result.rows.len(), out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
