//! Pipeline commands for training and evaluating learned message estimators.

pub mod commands;
pub mod config;

use std::path::PathBuf;

use anyhow::{anyhow, Context, Result};
use clap::{Parser, Subcommand};

pub use commands::{Inputs, Outcome};
pub use config::RunConfig;

#[derive(Debug, Parser)]
#[command(name = "msgcrf", version, about = "Learned message estimators for CRF segmentation")]
pub struct Cli {
    /// JSON run configuration (required).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory (overrides the config).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Root seed (overrides the config).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads for per-example gradient work.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic train and test sets.
    Generate,
    /// Train message estimators (or the exact-likelihood baseline).
    Train {
        #[arg(long)]
        dataset: Option<PathBuf>,
    },
    /// Predict labels for a dataset with a trained checkpoint.
    Infer {
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Score predicted label maps against ground truth.
    Eval {
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long)]
        predictions: Option<PathBuf>,
    },
    /// Finite-difference gradient checks.
    Gradcheck,
    /// Compare message passing against exact marginals.
    OracleCompare {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        baseline: Option<PathBuf>,
        #[arg(long)]
        dataset: Option<PathBuf>,
    },
}

pub fn run(cli: &Cli) -> Result<Outcome> {
    // Global args cannot be marked required in clap, so check here.
    let path = cli.config.as_ref().ok_or_else(|| anyhow!("--config PATH is required"))?;
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global().context("configuring thread pool")?;
    }
    let cfg = RunConfig::load(path)?.resolve(cli.seed, cli.out.clone())?;
    let mut inputs = Inputs::default();
    match &cli.command {
        Command::Generate => commands::cmd_generate(&cfg),
        Command::Train { dataset } => {
            inputs.dataset = dataset.clone();
            commands::cmd_train(&cfg, &inputs)
        }
        Command::Infer { dataset, checkpoint } => {
            inputs.dataset = dataset.clone();
            inputs.checkpoint = checkpoint.clone();
            commands::cmd_infer(&cfg, &inputs)
        }
        Command::Eval { dataset, predictions } => {
            inputs.dataset = dataset.clone();
            inputs.predictions = predictions.clone();
            commands::cmd_eval(&cfg, &inputs)
        }
        Command::Gradcheck => commands::cmd_gradcheck(&cfg),
        Command::OracleCompare { checkpoint, baseline, dataset } => {
            inputs.checkpoint = checkpoint.clone();
            inputs.baseline = baseline.clone();
            inputs.dataset = dataset.clone();
            commands::cmd_oracle_compare(&cfg, &inputs)
        }
    }
}
