//! Command-line driver: synthetic data generation, training, evaluation,
//! architecture analysis and checkpoint inspection.

pub mod commands;
pub mod config;
pub mod error;

use std::io::Write;
use std::path::PathBuf;

use clap::{Parser, Subcommand};
use tdcn_core::train::Strategy;
use tdcn_core::{Cue, Result};

use crate::config::RunConfig;

/// Flags shared by every subcommand. Each can also be set through a
/// `TDCN_`-prefixed environment variable.
#[derive(Debug, Parser)]
#[command(
    name = "tdcn",
    version,
    about = "Temporal dilated convolutional network toolkit"
)]
pub struct Cli {
    /// Run configuration file (TOML).
    #[arg(long, global = true, env = "TDCN_CONFIG")]
    pub config: Option<PathBuf>,

    /// Seed for data generation, initialization and shuffling.
    #[arg(long, global = true, env = "TDCN_SEED")]
    pub seed: Option<u64>,

    /// Resampling strategy: head-first or average. Repeat or separate with
    /// commas to evaluate several.
    #[arg(long, global = true, env = "TDCN_STRATEGY", value_delimiter = ',')]
    pub strategy: Vec<Strategy>,

    /// Cues to use, comma separated (aus, gaze, landmarks2d, pose).
    #[arg(long, global = true, env = "TDCN_CUES", value_delimiter = ',')]
    pub cues: Vec<Cue>,

    /// Output directory; for `synth`, where the dataset is written.
    #[arg(long, global = true, env = "TDCN_OUT")]
    pub out: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a labeled synthetic dataset.
    Synth,
    /// Train a model and keep the best-F1 checkpoint.
    Train {
        /// Hold out this fraction of training subjects per class for
        /// checkpoint selection instead of the validation split.
        #[arg(long, env = "TDCN_TUNING_RATIO")]
        tuning_ratio: Option<f64>,
    },
    /// Evaluate a checkpoint on every split of the dataset.
    Eval {
        /// Checkpoint to load; defaults to the one in the output directory.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Report receptive field, parameters and FLOPs per layer.
    Analyze,
    /// Print the contents of a checkpoint.
    InspectCheckpoint { path: PathBuf },
}

impl Cli {
    /// Loads the configuration file (or defaults) and applies flag
    /// overrides.
    pub fn run_config(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => {
                let mut cfg = RunConfig::default();
                cfg.resolve_paths(&std::env::current_dir().unwrap_or_default());
                cfg
            }
        };
        if let Some(seed) = self.seed {
            cfg.train.seed = seed;
            cfg.synth.seed = seed;
        }
        if let Some(&s) = self.strategy.first() {
            cfg.data.strategy = s;
        }
        if !self.cues.is_empty() {
            cfg.data.cues = self.cues.clone();
        }
        if let Some(out) = &self.out {
            cfg.output_dir = out.clone();
        }
        if let Command::Train {
            tuning_ratio: Some(r),
        } = self.command
        {
            cfg.data.tuning_ratio = Some(r);
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Runs the parsed command, writing human-readable output to `w`.
pub fn run(cli: &Cli, w: &mut dyn Write) -> Result<()> {
    if let Command::InspectCheckpoint { path } = &cli.command {
        commands::cmd_inspect(path, w)?;
        return Ok(());
    }
    let cfg = cli.run_config()?;
    match &cli.command {
        Command::Synth => {
            let dir = cli
                .out
                .clone()
                .unwrap_or_else(|| cfg.data.dataset_dir.clone());
            commands::cmd_synth(&cfg, &dir, w)?;
        }
        Command::Train { .. } => {
            commands::cmd_train(&cfg, w)?;
        }
        Command::Eval { checkpoint } => {
            let strategies = if cli.strategy.is_empty() {
                vec![cfg.data.strategy]
            } else {
                cli.strategy.clone()
            };
            commands::cmd_eval(&cfg, checkpoint.as_deref(), &strategies, w)?;
        }
        Command::Analyze => {
            commands::cmd_analyze(&cfg, w)?;
        }
        Command::InspectCheckpoint { .. } => unreachable!("handled above"),
    }
    Ok(())
}
