mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use mscd::crf::FilterBackend;
use mscd::ErrorKind;

#[derive(Debug, Parser)]
#[command(name = "mscd", version, about = "Multi-scale siamese change detection")]
pub struct Cli {
    /// Seed of every random stream.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// TOML file with flag values keyed by long flag name.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Worker threads for patch classification.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic pair and its change mask.
    Synth(SynthArgs),
    /// Unsupervised change detection on one pair.
    Unsup(UnsupArgs),
    /// Train the fully convolutional network on labeled pairs.
    Train(TrainArgs),
    /// Apply a trained network to a pair.
    Infer(InferArgs),
    /// Refine a probability map with the dense CRF.
    Refine(RefineArgs),
    /// Score a change map against ground truth.
    Eval(EvalArgs),
    /// Convert an AirChange benchmark tree into training/test directories.
    IngestAcd(IngestArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Side of the square scene in pixels.
    #[arg(long)]
    pub size: Option<usize>,
    #[arg(long)]
    pub bands: Option<usize>,
    /// Fraction of changed pixels, in (0, 0.5).
    #[arg(long)]
    pub change_frac: Option<f64>,
    /// Noise std of the second date.
    #[arg(long)]
    pub noise: Option<f64>,
    /// Gain of the second date, one value or one per band.
    #[arg(long, value_delimiter = ',')]
    pub gain: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',')]
    pub bias: Option<Vec<f64>>,
    #[arg(long)]
    pub shape_min: Option<usize>,
    #[arg(long)]
    pub shape_max: Option<usize>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct UnsupArgs {
    #[arg(long)]
    pub t1: Option<PathBuf>,
    #[arg(long)]
    pub t2: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Optional ground truth; adds the metric block to the report.
    #[arg(long)]
    pub truth: Option<PathBuf>,
    #[arg(long)]
    pub patch_size: Option<usize>,
    #[arg(long)]
    pub neg_pos_ratio: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    #[arg(long)]
    pub max_steps_per_epoch: Option<usize>,
    #[arg(long)]
    pub patience: Option<usize>,
    #[arg(long)]
    pub val_fraction: Option<f64>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Directories holding t1, t2 and mask files; repeatable.
    #[arg(long, num_args = 1..)]
    pub data: Option<Vec<PathBuf>>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    #[arg(long)]
    pub tile_size: Option<usize>,
    #[arg(long)]
    pub steps_per_epoch: Option<usize>,
    #[arg(long)]
    pub augment: Option<bool>,
}

#[derive(Debug, Args)]
pub struct InferArgs {
    /// Checkpoint file, or a directory containing model.ckpt.
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long)]
    pub t1: Option<PathBuf>,
    #[arg(long)]
    pub t2: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// CRF config file; also writes the refined map.
    #[arg(long)]
    pub crf: Option<PathBuf>,
    #[arg(long)]
    pub truth: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct RefineArgs {
    #[arg(long)]
    pub prob: Option<PathBuf>,
    #[arg(long)]
    pub t1: Option<PathBuf>,
    #[arg(long)]
    pub t2: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub crf_config: Option<PathBuf>,
    /// Grid file to search, or `default`; needs --truth.
    #[arg(long)]
    pub grid: Option<String>,
    #[arg(long)]
    pub truth: Option<PathBuf>,
    #[arg(long)]
    pub w1: Option<f64>,
    #[arg(long)]
    pub w2: Option<f64>,
    #[arg(long)]
    pub sigma_alpha: Option<f64>,
    #[arg(long)]
    pub sigma_beta: Option<f64>,
    #[arg(long)]
    pub sigma_gamma: Option<f64>,
    #[arg(long)]
    pub iterations: Option<usize>,
    #[arg(long, value_parser = parse_backend)]
    pub backend: Option<FilterBackend>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub pred: Option<PathBuf>,
    #[arg(long)]
    pub truth: Option<PathBuf>,
    /// Also write the metric block here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct IngestArgs {
    #[arg(long)]
    pub root: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn parse_backend(s: &str) -> Result<FilterBackend, String> {
    match s {
        "exact" => Ok(FilterBackend::Exact),
        "permutohedral" => Ok(FilterBackend::Permutohedral),
        "gauss_grid" | "gauss-grid" => Ok(FilterBackend::GaussGrid),
        other => Err(format!("unknown backend {other:?}; use exact, permutohedral or gauss-grid")),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match commands::run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e.kind() {
                ErrorKind::Validation => 2,
                ErrorKind::Data => 3,
                ErrorKind::Numerical => 4,
            })
        }
    }
}
