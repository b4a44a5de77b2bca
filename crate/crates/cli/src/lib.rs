//! Command-line front end: dataset generation, training, evaluation,
//! attention export, one-shot segmentation and manifest replay.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use simattn_core::Architecture;

mod commands;
pub mod manifest;
pub mod pgm;

pub use commands::{run, CheckpointMeta};

#[derive(Debug, Parser)]
#[command(name = "simattn", version, about = "Similarity attention for metric-learning models")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Debug, PartialEq, Subcommand, Serialize, Deserialize)]
#[serde(tag = "command", rename_all = "kebab-case")]
pub enum Command {
    /// Generate a synthetic dataset file.
    GenData(GenDataArgs),
    /// Train an encoder on a dataset file.
    Train(TrainArgs),
    /// Retrieval recall and attention localization of a checkpoint.
    Eval(EvalArgs),
    /// Write attention maps of one tuple as PGM images.
    Explain(ExplainArgs),
    /// One-shot segmentation from attention maps.
    Segment(SegmentArgs),
    /// Re-run a command from its manifest and verify its outputs.
    Replay(ReplayArgs),
}

#[derive(Clone, Debug, PartialEq, Args, Serialize, Deserialize)]
pub struct GenDataArgs {
    #[arg(long, default_value_t = 8)]
    pub classes: usize,
    #[arg(long, default_value_t = 70)]
    pub per_class: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 64)]
    pub height: usize,
    #[arg(long, default_value_t = 64)]
    pub width: usize,
    #[arg(long, default_value_t = 1)]
    pub channels: usize,
    #[arg(long, default_value_t = 12)]
    pub glyph_size: usize,
    /// Distractor blobs per image.
    #[arg(long, default_value_t = 6)]
    pub clutter: usize,
    #[arg(long, default_value_t = 6)]
    pub blob_size: usize,
    #[arg(long, default_value_t = 0.05)]
    pub noise: f64,
    #[arg(long)]
    pub out: PathBuf,
    /// Defaults to `<out>.manifest.json`.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerArg {
    Adam,
    Sgd,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitArg {
    /// Held-out samples of the training split.
    Val,
    All,
}

#[derive(Clone, Debug, PartialEq, Args, Serialize, Deserialize)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value = "triplet")]
    pub arch: Architecture,
    #[arg(long, default_value_t = 0.2)]
    pub gamma: f64,
    #[arg(long, default_value_t = 0.5)]
    pub margin: f64,
    /// Margin of the second quadruplet term.
    #[arg(long, default_value_t = 0.25)]
    pub margin2: f64,
    #[arg(long, default_value_t = 1.0)]
    pub contrastive_margin: f64,
    #[arg(long, default_value_t = 40)]
    pub epochs: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    #[arg(long, default_value_t = true, action = clap::ArgAction::Set)]
    pub detach_w: bool,
    #[arg(long, value_enum, default_value_t = OptimizerArg::Adam)]
    pub optimizer: OptimizerArg,
    #[arg(long, default_value_t = 0.9)]
    pub beta1: f64,
    #[arg(long, default_value_t = 0.999)]
    pub beta2: f64,
    #[arg(long, default_value_t = 1e-8)]
    pub eps: f64,
    #[arg(long, default_value_t = 16)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 20)]
    pub val_per_class: usize,
    #[arg(long, default_value_t = 10.0)]
    pub alpha_mask: f64,
    #[arg(long, default_value_t = 0.5)]
    pub beta_mask: f64,
    #[arg(long, default_value_t = true, action = clap::ArgAction::Set)]
    pub normalize_map: bool,
    #[arg(long, default_value_t = 2)]
    pub attention_layer: usize,
    #[arg(long, default_value_t = 32)]
    pub embedding_dim: usize,
    /// Also keep a checkpoint of every epoch as `<out>.epoch-<n>`.
    #[arg(long)]
    pub keep_epochs: bool,
    /// Checkpoint path; the config goes to `<out>.json` and the log to `<out>.log`.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub manifest: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Args, Serialize, Deserialize)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_enum, default_value_t = SplitArg::Val)]
    pub split: SplitArg,
    #[arg(long, default_value_t = 0.8)]
    pub quantile: f64,
    /// Seed of the tuples used to score attention.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Monte-Carlo trials of the random-map IoU baseline; 0 skips it.
    #[arg(long, default_value_t = 0)]
    pub baseline_trials: usize,
    /// Metrics file; defaults to `<checkpoint>.eval.txt`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub manifest: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Args, Serialize, Deserialize)]
pub struct ExplainArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Dataset indices of the tuple members, comma separated.
    #[arg(long, value_delimiter = ',', required = true)]
    pub indices: Vec<usize>,
    #[arg(long)]
    pub out_dir: PathBuf,
    /// Defaults to `<out-dir>/manifest.json`.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Args, Serialize, Deserialize)]
pub struct SegmentArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_enum, default_value_t = SplitArg::Val)]
    pub split: SplitArg,
    #[arg(long, default_value_t = 100)]
    pub pairs: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 0.8)]
    pub quantile: f64,
    /// Metrics file; defaults to `<checkpoint>.segment.txt`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub manifest: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Args, Serialize, Deserialize)]
pub struct ReplayArgs {
    pub manifest: PathBuf,
}
