//! `cfdiff`: dataset generation, training, counterfactuals, metrics and
//! augmentation from one binary.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

/// Marks failures that should exit with the usage/config code.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

#[derive(Parser, Debug)]
#[command(
    name = "cfdiff",
    version,
    about = "Detector-guided diffusion counterfactuals on a confounded toy dataset"
)]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct GlobalArgs {
    /// TOML or JSON run configuration; missing keys take defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Top-level seed, copied into every section.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Override a config key, e.g. `--set guidance.lambda_d=0`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub overrides: Vec<String>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate the confounded dataset.
    Dataset {
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a classifier, detector, attribute probe or denoiser.
    Train {
        /// classifier | detector | probe | denoiser
        #[arg(long)]
        role: String,
        /// erm | group_dro; defaults to the config section's objective.
        #[arg(long)]
        objective: Option<String>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate counterfactuals for a stratified set of factuals.
    Counterfactual {
        /// decodex | baseline | explain_detector
        #[arg(long)]
        mode: String,
        #[arg(long, default_value_t = 100)]
        n: usize,
        #[arg(long, default_value = "test")]
        split: String,
        /// Comma-separated subgroups to draw factuals from (default: all).
        #[arg(long)]
        subgroups: Option<String>,
        #[command(flatten)]
        models: ModelArgs,
        #[arg(long)]
        ddpm: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score one run, or compare two.
    Metrics {
        #[arg(long = "run", required = true, num_args = 1)]
        runs: Vec<PathBuf>,
        #[command(flatten)]
        models: ModelArgs,
        #[arg(long)]
        probe: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Synthesize counterfactual training samples.
    Augment {
        #[arg(long, default_value = "decodex")]
        mode: String,
        /// Defaults to `augmentation.n`.
        #[arg(long)]
        n: Option<usize>,
        #[command(flatten)]
        models: ModelArgs,
        #[arg(long)]
        ddpm: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Retrain a classifier on base plus augmented data and compare.
    Retrain {
        #[arg(long)]
        augmented: PathBuf,
        /// Unaugmented classifier for the "before" column.
        #[arg(long)]
        before: PathBuf,
        #[arg(long)]
        objective: Option<String>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args, Debug, Clone)]
pub struct ModelArgs {
    #[arg(long)]
    pub classifier: PathBuf,
    #[arg(long)]
    pub detector: PathBuf,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let usage = e.chain().any(|c| c.downcast_ref::<UsageError>().is_some());
            ExitCode::from(if usage { 2 } else { 1 })
        }
    }
}
