//! `rdseg`: dataset generation, training, inference, evaluation and
//! schedule inspection.

mod config;
mod error;
mod eval;
mod gen_data;
mod infer;
mod inputs;
mod schedule;
mod train;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::error::code;

#[derive(Debug, Parser)]
#[command(name = "rdseg", version, about = "Segmentation by recursive noise diffusion")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a synthetic shapes dataset as PNG pairs.
    GenData(GenDataArgs),
    /// Train a denoiser on a dataset split.
    Train(TrainArgs),
    /// Segment images with a trained checkpoint.
    Infer(InferArgs),
    /// Score predicted label maps against ground truth.
    Eval(EvalArgs),
    /// Print the noise schedule, executed steps and scale ladder.
    InspectSchedule(ScheduleArgs),
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    /// Number of samples.
    #[arg(long, default_value_t = 100)]
    pub n: usize,
    /// Width and height in pixels.
    #[arg(long, default_value_t = 64, value_parser = clap::value_parser!(u32).range(4..=4096))]
    pub size: u32,
    /// Number of classes, background included.
    #[arg(long, default_value_t = 3, value_parser = clap::value_parser!(u32).range(2..=16))]
    pub classes: u32,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Replace a non-empty output directory.
    #[arg(long)]
    pub overwrite: bool,
}

#[derive(Debug, Args)]
pub struct ModelOverrides {
    #[arg(long)]
    pub base_channels: Option<usize>,
    #[arg(long)]
    pub depth: Option<usize>,
    #[arg(long)]
    pub embed_dim: Option<usize>,
    /// Drop the bottleneck attention block.
    #[arg(long)]
    pub no_attention: bool,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// TOML run configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Training split directory.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Continue from a checkpoint written by an earlier run.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    #[command(flatten)]
    pub model: ModelOverrides,
    #[arg(long)]
    pub time_steps: Option<usize>,
    #[arg(long)]
    pub scales: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub lr_decay: Option<f64>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    #[arg(long)]
    pub clip_norm: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Switch off all augmentation.
    #[arg(long)]
    pub no_augment: bool,
}

#[derive(Debug, Args)]
pub struct InferArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// A dataset split, or a directory of PNG images.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// TOML run configuration; only `[sample]` and `output` are used.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Explicit decreasing step list, e.g. `25,20,10,1`.
    #[arg(long, value_delimiter = ',', conflicts_with = "stride")]
    pub steps: Option<Vec<usize>>,
    /// Run every k-th step starting at T.
    #[arg(long)]
    pub stride: Option<usize>,
    #[arg(long)]
    pub ensemble: Option<usize>,
    #[arg(long)]
    pub scales: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Palette file (`r g b name` per line); defaults to the data's own.
    #[arg(long)]
    pub palette: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Predicted label maps: a split or a directory of PNGs.
    #[arg(long)]
    pub pred: PathBuf,
    /// Ground-truth label maps, matched by file name.
    #[arg(long)]
    pub truth: PathBuf,
    #[arg(long)]
    pub palette: Option<PathBuf>,
    /// Also write metrics.json and metrics.txt here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ScheduleArgs {
    #[arg(long, default_value_t = 25, value_parser = clap::value_parser!(u64).range(1..=100_000))]
    pub time_steps: u64,
    #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u64).range(1..=16))]
    pub scales: u64,
    #[arg(long, default_value_t = 64, value_parser = clap::value_parser!(u64).range(1..=65_536))]
    pub width: u64,
    #[arg(long, default_value_t = 64, value_parser = clap::value_parser!(u64).range(1..=65_536))]
    pub height: u64,
    #[arg(long, value_delimiter = ',', conflicts_with = "stride")]
    pub steps: Option<Vec<usize>>,
    #[arg(long)]
    pub stride: Option<usize>,
    /// Write a PNG strip of one synthetic sample noised at each `--strip-at` step.
    #[arg(long)]
    pub strip: Option<PathBuf>,
    /// Steps shown in the strip; defaults to the executed steps.
    #[arg(long, value_delimiter = ',')]
    pub strip_at: Option<Vec<usize>>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { code::USAGE } else { code::SUCCESS });
        }
    };
    let result = match cli.command {
        Command::GenData(a) => gen_data::run(&a),
        Command::Train(a) => train::run(&a),
        Command::Infer(a) => infer::run(&a),
        Command::Eval(a) => eval::run(&a),
        Command::InspectSchedule(a) => schedule::run(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("rdseg: {f}");
            f.exit_code()
        }
    }
}
