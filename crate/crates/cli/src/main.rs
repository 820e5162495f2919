//! `fusionet`: synthetic data, training, ablation, stratification and
//! reporting from the command line.
//!
//! Exit codes: 0 success, 2 configuration or usage error, 3 training
//! divergence, 4 checkpoint mismatch, 5 I/O failure.

mod commands;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use fusionet_core::fusion::FusionMode;
use fusionet_core::Error;

#[derive(Parser)]
#[command(name = "fusionet", version, about = "Multimodal fusion experiments on synthetic data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Flags shared by every subcommand. Flags override the config file,
/// which overrides built-in defaults.
#[derive(Args, Clone, Debug, Default)]
pub struct Common {
    /// JSON experiment config.
    #[arg(long, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Built-in config: noisy-complementary, single-modality-informative
    /// or full-scale. Ignored when --config is given.
    #[arg(long)]
    pub preset: Option<String>,
    /// Run a single seed instead of the config's seed list.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
    #[arg(long, value_parser = parse_mode)]
    pub mode: Option<FusionMode>,
    #[arg(long)]
    pub beta: Option<f64>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub epsilon: Option<f64>,
    /// Checkpoint whose matching tensors initialise the model.
    #[arg(long = "warm-start", value_name = "PATH")]
    pub warm_start: Option<PathBuf>,
    #[arg(long)]
    pub topk: Option<usize>,
}

fn parse_mode(s: &str) -> Result<FusionMode, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

#[derive(Subcommand)]
enum Command {
    /// Generate train/test JSON-lines files.
    Synth(#[command(flatten)] Common),
    /// Train one model on a generated dataset.
    Train {
        #[command(flatten)]
        common: Common,
        /// Directory holding train.jsonl and test.jsonl (defaults to --out).
        #[arg(long, value_name = "DIR")]
        data: Option<PathBuf>,
    },
    /// Train and compare late, early and dynamic fusion over the seeds.
    Ablate(#[command(flatten)] Common),
    /// Split the classes of a metrics report into poor/average/best groups.
    Stratify {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "PATH")]
        metrics: PathBuf,
        /// Two increasing quantiles, comma separated.
        #[arg(long, default_value = "0.15,0.68")]
        cuts: String,
    },
    /// Merge every metrics file under a run directory.
    Report {
        #[command(flatten)]
        common: Common,
        dir: PathBuf,
        #[arg(long, default_value_t = 0.1)]
        bin_width: f64,
    },
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Diverged { .. } => 3,
        Error::CheckpointMismatch { .. } | Error::CheckpointFormat(_) => 4,
        Error::Io { .. } => 5,
        Error::Tensor(_) | Error::Distribution(_) | Error::Config { .. } | Error::Json { .. } => 2,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Synth(c) => commands::synth(&c),
        Command::Train { common, data } => commands::train(&common, data),
        Command::Ablate(c) => commands::ablate(&c),
        Command::Stratify { common, metrics, cuts } => commands::stratify(&common, &metrics, &cuts),
        Command::Report { common, dir, bin_width } => commands::report(&common, &dir, bin_width),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
