//! Command-line flags and the optional TOML config file.
//!
//! Every option may come from the command line or from the file section of
//! the same name. Precedence: command line, then file, then (for seeds)
//! `CSI_BERT_SEED`, then the built-in default.

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use std::path::PathBuf;

pub const SEED_ENV: &str = "CSI_BERT_SEED";

#[derive(Debug, Parser)]
#[command(name = "csibert", version, about = "Synthesize massive-MIMO CSI, train a masked transformer, evaluate it")]
pub struct Cli {
    /// TOML file supplying defaults for any flag.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,

    /// Worker threads (default: available cores).
    #[arg(long, global = true, value_name = "N")]
    pub threads: Option<usize>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a CSI dataset.
    Gen(GenArgs),
    /// Train the masked-reconstruction encoder.
    Train(TrainArgs),
    /// Run evaluation experiments against a checkpoint.
    Eval(EvalArgs),
    /// Run the fast invariant suite.
    Check(CheckArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    Desk,
    Paper,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScopeArg {
    All,
    Masked,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields, rename_all = "kebab-case")]
pub struct GenArgs {
    #[arg(long, value_enum)]
    pub preset: Option<Preset>,
    /// Output dataset directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub cells: Option<usize>,
    /// UEs per cell.
    #[arg(long)]
    pub ues: Option<usize>,
    #[arg(long)]
    pub snr_db: Option<f64>,
    #[arg(long)]
    pub subcarriers: Option<usize>,
    #[arg(long)]
    pub tx: Option<usize>,
    #[arg(long)]
    pub rx: Option<usize>,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields, rename_all = "kebab-case")]
pub struct TrainArgs {
    /// Dataset directory written by `gen`.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Output directory for the checkpoint, loss history and run manifest.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub model_preset: Option<Preset>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    /// `bernoulli:P`, `every:K` or `ratio:G`.
    #[arg(long)]
    pub mask: Option<String>,
    /// `sgd` or `adam`.
    #[arg(long)]
    pub optimizer: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Reuse one mask per sample across epochs.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub fixed_mask: Option<bool>,
    #[arg(long, value_enum)]
    pub loss_scope: Option<ScopeArg>,
    /// Continue from the checkpoint and optimizer state in this directory.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields, rename_all = "kebab-case")]
pub struct EvalArgs {
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Checkpoint written by `train`.
    #[arg(long)]
    pub ckpt: Option<PathBuf>,
    /// `all` or one experiment name.
    #[arg(long)]
    pub experiment: Option<String>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields, rename_all = "kebab-case")]
pub struct CheckArgs {
    /// Print machine-readable results.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub json: Option<bool>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Random trials per differentiable op.
    #[arg(long)]
    pub trials: Option<usize>,
    /// Corrupt the backward rule of the named op (for testing the checker).
    #[arg(long, value_name = "OP")]
    pub inject_fault: Option<String>,
    /// Also write the JSON results and a run manifest here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FileConfig {
    pub seed: Option<u64>,
    pub threads: Option<usize>,
    pub gen: GenArgs,
    pub train: TrainArgs,
    pub eval: EvalArgs,
    pub check: CheckArgs,
}

/// Fills every unset field of `self` from `file`.
pub trait Merge {
    fn merge(self, file: Self) -> Self;
}

macro_rules! merge_fields {
    ($t:ty { $($f:ident),* }) => {
        impl Merge for $t {
            fn merge(self, file: Self) -> Self {
                Self { $($f: self.$f.or(file.$f)),* }
            }
        }
    };
}

merge_fields!(GenArgs { preset, out, seed, cells, ues, snr_db, subcarriers, tx, rx });
merge_fields!(TrainArgs {
    data, out, model_preset, lr, batch, epochs, mask, optimizer, seed, fixed_mask, loss_scope, resume
});
merge_fields!(EvalArgs { data, ckpt, experiment, out, seed });
merge_fields!(CheckArgs { json, seed, trials, inject_fault, out });

/// Seed from the flag, the file's section, the file's top level, the
/// environment, or 0, in that order.
pub fn resolve_seed(merged: Option<u64>, file_top: Option<u64>) -> Result<u64, String> {
    if let Some(s) = merged.or(file_top) {
        return Ok(s);
    }
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map_err(|_| format!("{SEED_ENV}={v:?} is not an unsigned integer")),
        Err(_) => Ok(0),
    }
}
