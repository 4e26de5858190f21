//! `cardioprop`: phantom generation, training, segmentation, evaluation,
//! ground-truth adaptation and gradient checks from the command line.
//!
//! Failures print one line, `CODE: detail`, to standard error and exit
//! with a nonzero status.

mod commands;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::error::CliError;

#[derive(Debug, Parser)]
#[command(name = "cardioprop", version, about = "Slice-propagation cardiac segmentation toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate synthetic ED/ES phantom bundles.
    Phantom(PhantomArgs),
    /// Train a network on bundles with ground-truth masks.
    Train(TrainArgs),
    /// Segment every slice of a bundle.
    Segment(SegmentArgs),
    /// Score predicted masks against ground-truth bundles.
    Evaluate(EvaluateArgs),
    /// Write a bundle whose masks follow the basal-slice adaptation rule.
    AdaptGt(AdaptArgs),
    /// Compare analytic gradients with finite differences.
    GradCheck(GradCheckArgs),
}

#[derive(Debug, Args)]
pub struct PhantomArgs {
    /// Output directory; receives `case_NNN_ed` and `case_NNN_es` bundles.
    #[arg(long)]
    pub out: PathBuf,
    /// Number of cases (ED/ES pairs).
    #[arg(long, default_value_t = 1)]
    pub count: usize,
    /// Seed of the first case; case `i` uses `seed + i`.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// JSON phantom configuration; omitted fields take their defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Add an LV-like ring next to the heart on apical slices.
    #[arg(long)]
    pub distractor: bool,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// roi, lvrv, lv, lvrv-noprop or lvrv-midstart.
    #[arg(long)]
    pub net: String,
    /// A bundle, or a directory whose subdirectories are bundles.
    #[arg(long)]
    pub data: PathBuf,
    /// Output directory for `final.ckpt`, `best.ckpt` and `training.json`.
    #[arg(long)]
    pub out: PathBuf,
    /// JSON training configuration; omitted fields take their defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Overrides the configured number of epochs.
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Overrides the configured network input size.
    #[arg(long)]
    pub input_size: Option<usize>,
}

#[derive(Debug, Args)]
pub struct SegmentArgs {
    #[arg(long)]
    pub bundle: PathBuf,
    /// Segmentation checkpoint.
    #[arg(long)]
    pub model: PathBuf,
    /// Output directory for the masks and `run.json`.
    #[arg(long)]
    pub out: PathBuf,
    /// propagate, mid-start or independent.
    #[arg(long, default_value = "propagate")]
    pub mode: String,
    /// ROI checkpoint; without it the whole image is segmented.
    #[arg(long)]
    pub roi_model: Option<PathBuf>,
    /// Crop to the box around the bundle's own ground-truth masks instead
    /// of running an ROI network.
    #[arg(long, conflicts_with = "roi_model")]
    pub gt_roi: bool,
    /// ED bundle used to find the ROI (defaults to `--bundle`).
    #[arg(long)]
    pub roi_from: Option<PathBuf>,
    /// Band of ED slices searched for the heart, as `lo,hi` fractions.
    #[arg(long, default_value = "0.2,0.6")]
    pub roi_range: String,
    /// Extra clean-up for stacks whose basal slices are poorly aligned.
    #[arg(long)]
    pub acdc_rules: bool,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// Prediction directories, one per truth bundle.
    #[arg(long, num_args = 1.., required = true)]
    pub pred: Vec<PathBuf>,
    /// Ground-truth bundles; masks are adapted at the recorded (or detected) base.
    #[arg(long, num_args = 1.., required = true)]
    pub truth: Vec<PathBuf>,
    /// Report file (JSON).
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct AdaptArgs {
    #[arg(long)]
    pub bundle: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Base index; defaults to the recorded one, else it is detected.
    #[arg(long, allow_hyphen_values = true)]
    pub base: Option<i32>,
}

#[derive(Debug, Args)]
pub struct GradCheckArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Randomised shapes per layer kind.
    #[arg(long, default_value_t = 2)]
    pub rounds: usize,
    /// Optional JSON report.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Phantom(a) => commands::phantom(&a),
        Command::Train(a) => commands::train(&a),
        Command::Segment(a) => commands::segment(&a),
        Command::Evaluate(a) => commands::evaluate(&a),
        Command::AdaptGt(a) => commands::adapt_gt(&a),
        Command::GradCheck(a) => commands::grad_check(&a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let detail = e.to_string();
            let line = detail
                .lines()
                .take_while(|l| !l.starts_with("Usage:"))
                .map(str::trim)
                .filter(|l| !l.is_empty())
                .collect::<Vec<_>>()
                .join(" ");
            eprintln!("E_USAGE: {}", line.trim_start_matches("error: "));
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{e}");
            ExitCode::FAILURE
        }
    }
}
