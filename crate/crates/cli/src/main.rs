//! `boxmask`: data generation, training, inference, evaluation, ablations,
//! pseudo-label export and the numerical checks.

mod commands;
mod config;

use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "boxmask", version, about = "Box-to-mask video segmentation")]
pub struct Cli {
    /// Seed for every random choice of the subcommand.
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// Threads for sequence-level parallelism.
    #[arg(long, global = true, value_parser = clap::value_parser!(u64).range(1..))]
    pub workers: Option<u64>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic video dataset.
    GenData(GenDataArgs),
    /// Train a model and write checkpoints.
    Train(TrainArgs),
    /// Predict masks for every frame of a dataset.
    Infer(InferArgs),
    /// Mean Jaccard of a checkpoint or a baseline.
    Eval(EvalArgs),
    /// Evaluate a checkpoint over the values of one setting.
    Ablate(AblateArgs),
    /// Write pseudo-label masks for a subsampled set of frames.
    ExportLabels(ExportArgs),
    /// Run the numerical verification suites.
    Check(CheckArgs),
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[arg(long)]
    pub out: std::path::PathBuf,
    #[arg(long, default_value_t = 20)]
    pub num_seq: usize,
    /// Add a look-alike distractor that crosses the target.
    #[arg(long)]
    pub hard_distractors: bool,
    #[arg(long, default_value_t = 40)]
    pub frames: usize,
    #[arg(long, default_value_t = 128)]
    pub height: usize,
    #[arg(long, default_value_t = 128)]
    pub width: usize,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: Option<std::path::PathBuf>,
    #[arg(long)]
    pub out: std::path::PathBuf,
    /// Training data; overrides `data.train` of the config.
    #[arg(long)]
    pub data: Option<std::path::PathBuf>,
    /// Overrides `pipeline.train.iterations`.
    #[arg(long)]
    pub iterations: Option<usize>,
    /// Start from the weights of this checkpoint.
    #[arg(long)]
    pub init: Option<std::path::PathBuf>,
}

/// Inference settings that may differ from the checkpoint's.
#[derive(Debug, Args, Default)]
pub struct InferOverrides {
    #[arg(long)]
    pub variant: Option<String>,
    #[arg(long)]
    pub num_frames: Option<usize>,
    #[arg(long)]
    pub interval: Option<usize>,
    #[arg(long)]
    pub sd_iters: Option<usize>,
    #[arg(long)]
    pub crop_scale: Option<f64>,
}

#[derive(Debug, Args)]
pub struct InferArgs {
    #[arg(long)]
    pub ckpt: std::path::PathBuf,
    #[arg(long)]
    pub data: std::path::PathBuf,
    #[arg(long)]
    pub out: std::path::PathBuf,
    #[command(flatten)]
    pub overrides: InferOverrides,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Required unless `--baseline` is given.
    #[arg(long)]
    pub ckpt: Option<std::path::PathBuf>,
    #[arg(long)]
    pub data: std::path::PathBuf,
    #[arg(long)]
    pub report: std::path::PathBuf,
    /// Evaluate a reference predictor (box, oracle, empty) instead.
    #[arg(long, conflicts_with = "ckpt")]
    pub baseline: Option<String>,
    /// Write frame | prediction | ground truth strips here.
    #[arg(long)]
    pub dump: Option<std::path::PathBuf>,
    #[command(flatten)]
    pub overrides: InferOverrides,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[arg(long)]
    pub ckpt: std::path::PathBuf,
    #[arg(long)]
    pub data: std::path::PathBuf,
    #[arg(long)]
    pub report: std::path::PathBuf,
    /// num_frames, sd_iters, crop_scale, interval or variant.
    #[arg(long)]
    pub axis: String,
    /// Comma-separated values; the axis defaults when omitted.
    #[arg(long, value_delimiter = ',')]
    pub values: Option<Vec<String>>,
}

#[derive(Debug, Args)]
pub struct ExportArgs {
    #[arg(long)]
    pub ckpt: std::path::PathBuf,
    #[arg(long)]
    pub data: std::path::PathBuf,
    #[arg(long)]
    pub out: std::path::PathBuf,
    #[arg(long, default_value_t = 5)]
    pub stride: usize,
    #[arg(long, default_value_t = 200)]
    pub max_frames: usize,
}

#[derive(Debug, Args)]
pub struct CheckArgs {
    /// Gradient checks of the tape operations, the solver and the pipeline.
    #[arg(long)]
    pub grad: bool,
    /// Solver against the dense normal-equation solve.
    #[arg(long)]
    pub oracle: bool,
    /// Descent monotonicity and solver invariances.
    #[arg(long)]
    pub invariance: bool,
    /// Random instances per suite.
    #[arg(long, default_value_t = 50)]
    pub cases: usize,
    /// Solver steps for the oracle comparison.
    #[arg(long, default_value_t = 15)]
    pub sd_iters: usize,
    #[arg(long)]
    pub report: Option<std::path::PathBuf>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(2) } else { ExitCode::SUCCESS };
        }
    };
    match commands::run(cli) {
        Ok(code) => code,
        Err(e) => {
            let causes: Vec<String> = e.chain().skip(1).map(|c| c.to_string()).collect();
            let report = serde_json::json!({ "error": e.to_string(), "causes": causes });
            eprintln!("{report}");
            ExitCode::FAILURE
        }
    }
}
