//! `safire`: data generation, training, inference and evaluation.
//!
//! Exit codes: 0 success, 1 usage error, 2 data or format error, 3 numerical
//! failure.

mod commands;
mod config;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand, ValueEnum};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser, Debug)]
#[command(name = "safire", version, about = "Promptable source-region segmentation for image forgery localization")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

/// Flags every subcommand accepts.
#[derive(Args, Debug, Clone)]
pub struct Common {
    /// Master seed; overrides `seed` in the config file (default 0).
    #[arg(long)]
    pub seed: Option<u64>,
    /// JSON config file; its keys default every flag of the subcommand.
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Worker threads for per-image parallelism (default 1). Results do not depend on it.
    #[arg(long, value_name = "N")]
    pub jobs: Option<usize>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic multi-source dataset.
    Gen(GenArgs),
    /// Contrastive region-to-region pretraining of the image encoder.
    Pretrain(PretrainArgs),
    /// Train the prompted decoder on top of a pretrained encoder.
    Train(TrainArgs),
    /// Grid-prompt inference on one image or a directory of PNGs.
    Infer(InferArgs),
    /// Score predictions against ground truth.
    Eval(EvalArgs),
    /// Score binary inference under increasing post-processing.
    Robustness(RobustnessArgs),
    /// Compare analytic gradients with central finite differences.
    Gradcheck(GradcheckArgs),
}

#[derive(Args, Debug)]
pub struct GenArgs {
    #[command(flatten)]
    pub common: Common,
    /// Output directory (images/, partitions/, binary/, manifest.json).
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
    /// Number of images (default 100).
    #[arg(long)]
    pub count: Option<usize>,
    /// Square image side in pixels, a multiple of 8 (default 256).
    #[arg(long)]
    pub size: Option<usize>,
    /// Sources per image (default 2); with --max-sources, the minimum.
    #[arg(long)]
    pub sources: Option<usize>,
    /// Upper bound of a uniformly drawn source count.
    #[arg(long)]
    pub max_sources: Option<usize>,
    /// Use the strongly separated signature preset.
    #[arg(long)]
    pub strong: bool,
}

#[derive(Args, Debug)]
pub struct PretrainArgs {
    #[command(flatten)]
    pub common: Common,
    /// Dataset directory with images/ and partitions/.
    #[arg(long, value_name = "DIR")]
    pub data: PathBuf,
    /// Checkpoint to write.
    #[arg(long, value_name = "CKPT")]
    pub out: PathBuf,
    /// Total number of epochs (default 20).
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Learning rate (default 0.05).
    #[arg(long)]
    pub lr: Option<f64>,
    /// Images per step (default 8).
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Continue from a checkpoint written by an earlier run with the same data and seed.
    #[arg(long, value_name = "CKPT")]
    pub resume: Option<PathBuf>,
    /// Per-epoch CSV log (default: the checkpoint path with a .csv extension).
    #[arg(long, value_name = "FILE")]
    pub log: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: Common,
    /// Dataset directory with images/ and binary/ (or partitions/).
    #[arg(long, value_name = "DIR")]
    pub data: PathBuf,
    /// Checkpoint to write.
    #[arg(long, value_name = "CKPT")]
    pub out: PathBuf,
    /// Pretrained checkpoint supplying the encoder and prompt projection.
    #[arg(long, value_name = "CKPT", required_unless_present = "resume")]
    pub init: Option<PathBuf>,
    /// Continue from a checkpoint written by an earlier run with the same data and seed.
    #[arg(long, value_name = "CKPT", conflicts_with_all = ["init", "baseline"])]
    pub resume: Option<PathBuf>,
    /// Total number of epochs (default 30).
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Learning rate (default 0.02).
    #[arg(long)]
    pub lr: Option<f64>,
    /// Images per step (default 8).
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Point pairs sampled per image and step (default 4).
    #[arg(long)]
    pub pairs: Option<usize>,
    /// Train a plain binary segmenter (no prompts, unweighted BCE) instead.
    #[arg(long)]
    pub baseline: bool,
    /// Per-epoch CSV log (default: the checkpoint path with a .csv extension).
    #[arg(long, value_name = "FILE")]
    pub log: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum ModeArg {
    Binary,
    Multi,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum ClusterArg {
    Kmeans,
    Dbscan,
}

#[derive(Args, Debug)]
pub struct InferArgs {
    #[command(flatten)]
    pub common: Common,
    /// Trained checkpoint.
    #[arg(long, value_name = "CKPT")]
    pub ckpt: PathBuf,
    /// Input PNG, or a directory whose PNGs are all processed.
    #[arg(long, value_name = "PATH")]
    pub image: PathBuf,
    /// Output directory.
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
    /// Prompt grid side (default 16).
    #[arg(long)]
    pub grid: Option<usize>,
    /// Binary heatmap or multi-source partition (default binary).
    #[arg(long, value_enum)]
    pub mode: Option<ModeArg>,
    /// Clustering of representative features (default kmeans).
    #[arg(long, value_enum)]
    pub cluster: Option<ClusterArg>,
    /// Number of k-means clusters (default 2).
    #[arg(long)]
    pub m: Option<usize>,
    /// DBSCAN radius on normalized features (default 0.3).
    #[arg(long)]
    pub eps: Option<f64>,
    /// DBSCAN core-point neighbourhood size (default 3).
    #[arg(long)]
    pub min_pts: Option<usize>,
    /// The checkpoint is a plain binary segmenter; predict without prompts.
    #[arg(long)]
    pub baseline: bool,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum MetricArg {
    #[value(name = "f1_fixed")]
    F1Fixed,
    #[value(name = "f1_best")]
    F1Best,
    Pmiou,
    Ari,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: Common,
    /// Directory written by `infer`.
    #[arg(long, value_name = "DIR")]
    pub pred: PathBuf,
    /// Ground-truth PNGs: binary masks for F1, partitions for pmiou/ari.
    #[arg(long, value_name = "DIR")]
    pub gt: PathBuf,
    /// Metric to report.
    #[arg(long, value_enum)]
    pub metric: Option<MetricArg>,
    /// CSV report (one row per image plus the mean).
    #[arg(long, value_name = "FILE")]
    pub out: PathBuf,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum TransformArg {
    Blur,
    Noise,
    Jpeg,
    Gamma,
}

#[derive(Args, Debug)]
pub struct RobustnessArgs {
    #[command(flatten)]
    pub common: Common,
    /// Trained checkpoint.
    #[arg(long, value_name = "CKPT")]
    pub ckpt: PathBuf,
    /// Test dataset directory.
    #[arg(long, value_name = "DIR")]
    pub data: PathBuf,
    /// Post-processing family.
    #[arg(long, value_enum)]
    pub transform: Option<TransformArg>,
    /// Comma-separated levels: sigma for blur/noise, quality for jpeg, exponent for gamma.
    #[arg(long, value_delimiter = ',', num_args = 1..)]
    pub levels: Option<Vec<f64>>,
    /// Prompt grid side (default 16).
    #[arg(long)]
    pub grid: Option<usize>,
    /// CSV report (transform, level, score, n_images).
    #[arg(long, value_name = "FILE")]
    pub out: PathBuf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum GradMode {
    All,
    Pretrain,
    Train,
    Baseline,
}

#[derive(Args, Debug)]
pub struct GradcheckArgs {
    #[command(flatten)]
    pub common: Common,
    /// Coordinates checked per loss (default 100).
    #[arg(long)]
    pub coords: Option<usize>,
    /// Finite-difference step (default 1e-4).
    #[arg(long)]
    pub eps: Option<f64>,
    /// Which loss to check (default all: contrastive pretraining and prompted training).
    #[arg(long, value_enum)]
    pub mode: Option<GradMode>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(commands::exit_code(&err))
        }
    }
}
