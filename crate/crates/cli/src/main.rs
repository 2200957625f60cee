//! `terramae` command-line entry point.
//!
//! Exit codes: 0 on success, 1 on usage errors (bad flags or out-of-range
//! values), 2 on data errors (unreadable or invalid inputs, failed checks).

mod commands;
mod ppm;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

#[derive(Debug, Parser)]
#[command(name = "terramae", version, about = "Multi-source masked autoencoder pipeline for satellite imagery")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate synthetic multi-source regions into EVSH shards.
    Synth(SynthArgs),
    /// Print per-source band statistics of a dataset.
    Stats(StatsArgs),
    /// Rank crop windows by label entropy under a cloud limit and select
    /// temporal sequences.
    Curate(CurateArgs),
    /// Generate one mask and print its per-slice counts.
    MaskDemo(MaskDemoArgs),
    /// Pretrain the masked autoencoder.
    Pretrain(PretrainArgs),
    /// Verify analytic gradients against finite differences on a small model.
    Gradcheck(GradcheckArgs),
    /// Write input / masked / reconstruction panels as PPM images.
    Reconstruct(ReconstructArgs),
}

fn ratio(s: &str) -> Result<f64, String> {
    let v: f64 = s.parse().map_err(|e| format!("{e}"))?;
    if (0.0..=1.0).contains(&v) {
        Ok(v)
    } else {
        Err(format!("{v} is outside [0, 1]"))
    }
}

fn positive_f64(s: &str) -> Result<f64, String> {
    let v: f64 = s.parse().map_err(|e| format!("{e}"))?;
    if v > 0.0 && v.is_finite() {
        Ok(v)
    } else {
        Err(format!("{v} must be a positive finite number"))
    }
}

#[derive(Debug, Args, Serialize)]
pub struct SynthArgs {
    /// Number of regions to generate.
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..=1_000_000))]
    pub regions: u64,
    /// Generator seed.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Source profile name; repeat or comma-separate for several sources.
    #[arg(long, value_delimiter = ',', required = true)]
    pub profile: Vec<String>,
    /// Output directory for shard files.
    #[arg(long)]
    pub out: PathBuf,
    /// Regions per shard file.
    #[arg(long, default_value_t = 64, value_parser = clap::value_parser!(u64).range(1..=1_000_000))]
    pub shard_size: u64,
    /// Revisit range MIN:MAX applied to every profile (capped at its catalog value).
    #[arg(long)]
    pub revisits: Option<String>,
}

#[derive(Debug, Args, Serialize)]
pub struct StatsArgs {
    /// Shard file or directory of shards.
    #[arg(long)]
    pub data: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct CurateArgs {
    /// Shard file or directory of shards containing a `sentinel2-scl` source.
    #[arg(long)]
    pub input: PathBuf,
    /// Crop window side in pixels.
    #[arg(long, default_value_t = 96, value_parser = clap::value_parser!(u64).range(1..=100_000))]
    pub window: u64,
    /// Keep windows whose mean cloud fraction is strictly below this value.
    #[arg(long, default_value_t = 0.1, value_parser = ratio)]
    pub cloud_max: f64,
    /// Windows kept per region.
    #[arg(long, default_value_t = 4, value_parser = clap::value_parser!(u64).range(1..=1_000_000))]
    pub top_k: u64,
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum SchemeArg {
    Random,
    Tube,
    Combined,
}

impl SchemeArg {
    fn name(self) -> &'static str {
        match self {
            SchemeArg::Random => "random",
            SchemeArg::Tube => "tube",
            SchemeArg::Combined => "combined",
        }
    }
}

#[derive(Debug, Args, Serialize)]
pub struct MaskDemoArgs {
    /// Masking scheme.
    #[arg(long, value_enum, default_value_t = SchemeArg::Tube)]
    pub scheme: SchemeArg,
    /// Mask ratio for random and tube masks (combined uses 0.75 tube + 0.25 random).
    #[arg(long, default_value_t = 0.75, value_parser = ratio)]
    pub ratio: f64,
    /// Timesteps.
    #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u64).range(1..=10_000))]
    pub t: u64,
    /// Sources.
    #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u64).range(1..=10_000))]
    pub s: u64,
    /// Patches per slice.
    #[arg(long, default_value_t = 196, value_parser = clap::value_parser!(u64).range(1..=1_000_000))]
    pub p: u64,
    /// Mask seed.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args, Serialize)]
pub struct PretrainArgs {
    /// Shard file or directory of shards.
    #[arg(long)]
    pub data: PathBuf,
    /// Tasks as source subsets: `;` between tasks, `,` between sources
    /// (e.g. "sentinel1;sentinel2;sentinel1,sentinel2"). Default: one task
    /// per source plus one with all sources.
    #[arg(long)]
    pub tasks: Option<String>,
    /// Masking scheme.
    #[arg(long, value_enum, default_value_t = SchemeArg::Combined)]
    pub mask: SchemeArg,
    /// Mask ratio for random and tube masks.
    #[arg(long, default_value_t = 0.75, value_parser = ratio)]
    pub ratio: f64,
    /// Epochs.
    #[arg(long, default_value_t = 100, value_parser = clap::value_parser!(u64).range(1..=1_000_000))]
    pub epochs: u64,
    /// Warmup epochs (must be below --epochs).
    #[arg(long, default_value_t = 10, value_parser = clap::value_parser!(u64).range(0..=1_000_000))]
    pub warmup: u64,
    /// Base learning rate; the peak rate is blr·batch/256.
    #[arg(long, default_value_t = 1.32e-4, value_parser = positive_f64)]
    pub blr: f64,
    /// Effective batch size over all workers.
    #[arg(long, default_value_t = 2048, value_parser = clap::value_parser!(u64).range(1..=1_000_000))]
    pub batch: u64,
    /// Synchronous workers; must divide --batch.
    #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u64).range(1..=1024))]
    pub workers: u64,
    /// Run seed (initialization, sampling, masks, dropout).
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output directory for metrics.jsonl and checkpoint.emck.
    #[arg(long)]
    pub out: PathBuf,
    /// Total optimizer steps, overriding epochs × steps per epoch.
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..=100_000_000))]
    pub steps: Option<u64>,
    /// Stop after this many steps (the schedule is unchanged).
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..=100_000_000))]
    pub stop_at: Option<u64>,
    /// Cap on timesteps per sample.
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..=1_000))]
    pub max_timesteps: Option<u64>,
    /// Probability of dropping all timestamps of a sample.
    #[arg(long, default_value_t = 0.10, value_parser = ratio)]
    pub timestep_dropout: f64,
    /// Resume from this checkpoint (the run config must match).
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct GradcheckArgs {
    /// Seed for parameters, inputs, mask and scalar selection.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Finite-difference step.
    #[arg(long, default_value_t = 1e-4)]
    pub eps: f64,
    /// Scalars to check.
    #[arg(long, default_value_t = 200, value_parser = clap::value_parser!(u64).range(1..=100_000))]
    pub n: u64,
    /// Fail when the maximum relative error reaches this value.
    #[arg(long, default_value_t = 1e-4, value_parser = positive_f64)]
    pub tolerance: f64,
}

#[derive(Debug, Args, Serialize)]
pub struct ReconstructArgs {
    /// Checkpoint file.
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Shard file or directory of shards.
    #[arg(long)]
    pub data: PathBuf,
    /// Output directory for PPM panels.
    #[arg(long)]
    pub out: PathBuf,
    /// Region index within the dataset.
    #[arg(long, default_value_t = 0)]
    pub region: u64,
    /// Mask seed.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

/// Echo the resolved configuration of a run.
fn echo<T: Serialize>(command: &str, args: &T) {
    let v = serde_json::json!({ "command": command, "config": args });
    eprintln!("{v}");
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match &cli.command {
        Command::Synth(a) => {
            echo("synth", a);
            commands::synth(a)
        }
        Command::Stats(a) => {
            echo("stats", a);
            commands::stats(a)
        }
        Command::Curate(a) => {
            echo("curate", a);
            commands::curate(a)
        }
        Command::MaskDemo(a) => {
            echo("mask-demo", a);
            commands::mask_demo(a)
        }
        Command::Pretrain(a) => commands::pretrain(a),
        Command::Gradcheck(a) => {
            echo("gradcheck", a);
            commands::gradcheck(a)
        }
        Command::Reconstruct(a) => {
            echo("reconstruct", a);
            commands::reconstruct(a)
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
