//! The `moelora` command-line driver: `generate`, `train`, `compare` and
//! `sweep-experts`.
//!
//! Exit codes: 0 on success, 2 for configuration or validation errors, 3 for
//! numeric failures during training.

mod commands;
mod config;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

pub use commands::{
    cmd_compare, cmd_generate, cmd_sweep_experts, cmd_train, compare_csv, compare_table, prepare_out, run_seed,
    CompareRow, GenerateSummary, SweepRow, TrainSummary, THREADS_ENV,
};
pub use config::{CompareConfig, DataConfig, RunConfig, SweepConfig};

use crate::data::SyntheticSpec;
use crate::{Error, Result};

#[derive(Debug, Parser)]
#[command(name = "moelora", version, about = "Multi-domain CTR training with mixtures of low-rank experts")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// TOML config (a synthetic spec for `generate`, a run config otherwise).
    #[arg(long)]
    pub config: PathBuf,
    /// Output directory; must not exist unless --force is given.
    #[arg(long)]
    pub out: PathBuf,
    /// Comma-separated seeds overriding the config.
    #[arg(long, value_delimiter = ',')]
    pub seed: Vec<u64>,
    /// Replace an existing output directory.
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic multi-domain dataset and its spec sidecar.
    Generate(Common),
    /// Run the training pipeline once per seed.
    Train(Common),
    /// Compare modes per arch, seed-averaged, with deltas to the mlora baseline.
    Compare(Common),
    /// Sweep the total number of experts per layer.
    SweepExperts {
        #[command(flatten)]
        common: Common,
        /// Comma-separated total expert counts overriding the config.
        #[arg(long, value_delimiter = ',')]
        counts: Vec<usize>,
    },
}

pub fn exit_code(err: &Error) -> i32 {
    if err.is_numeric() {
        3
    } else {
        2
    }
}

fn load_run(common: &Common) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(&common.config)?;
    if !common.seed.is_empty() {
        cfg.seeds = common.seed.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Executes a parsed command, returning the text printed to stdout.
pub fn run(cli: Cli) -> Result<String> {
    match cli.command {
        Command::Generate(c) => {
            let text = std::fs::read_to_string(&c.config).map_err(|e| Error::Config(format!("{}: {e}", c.config.display())))?;
            let mut spec: SyntheticSpec = toml::from_str(&text).map_err(|e| Error::Config(e.to_string()))?;
            if let Some(&seed) = c.seed.first() {
                spec.seed = seed;
            }
            spec.validate().map_err(|e| Error::Config(e.to_string()))?;
            prepare_out(&c.out, c.force)?;
            let s = cmd_generate(&spec, &c.out)?;
            Ok(format!(
                "wrote {} rows over {} domains to {} (sparsity {:.6}, positive rate {:.4})\n{}\n",
                s.rows,
                s.domains,
                s.csv.display(),
                s.sparsity,
                s.positive_rate,
                serde_json::to_string(&s).expect("serializes")
            ))
        }
        Command::Train(c) => {
            let cfg = load_run(&c)?;
            prepare_out(&c.out, c.force)?;
            let s = cmd_train(&cfg, &c.out)?;
            let mut text = String::new();
            for (seed, w) in &s.per_seed {
                text.push_str(&format!("seed {seed}: wauc {w:.6}\n"));
            }
            text.push_str(&format!("mean wauc {:.6} over {} seeds (config {})\n", s.mean_wauc, s.per_seed.len(), s.config_hash));
            text.push_str(&std::fs::read_to_string(c.out.join("metrics.jsonl"))?);
            Ok(text)
        }
        Command::Compare(c) => {
            let cfg = load_run(&c)?;
            prepare_out(&c.out, c.force)?;
            let rows = cmd_compare(&cfg, &c.out)?;
            Ok(compare_table(&rows))
        }
        Command::SweepExperts { common, counts } => {
            let cfg = load_run(&common)?;
            let counts = if counts.is_empty() { cfg.sweep.expert_counts.clone() } else { counts };
            prepare_out(&common.out, common.force)?;
            cmd_sweep_experts(&cfg, &counts, &common.out)?;
            Ok(std::fs::read_to_string(common.out.join("sweep.csv"))?)
        }
    }
}
