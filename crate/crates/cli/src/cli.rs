// SPDX-License-Identifier: MIT OR Apache-2.0

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use gim_core::faithfulness::SWEEP_TEMPERATURES;
use gim_core::model::ModelConfig;
use serde::Serialize;

#[derive(Debug, Parser)]
#[command(
    name = "gim",
    version,
    about = "Gradient attribution workbench for toy transformers"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,

    /// Worker threads for per-item work; 0 uses every core.
    #[arg(long, global = true, default_value_t = 0)]
    pub threads: usize,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a random or planted weight file.
    GenModel(GenModelArgs),
    /// Write a synthetic JSONL dataset.
    GenData(GenDataArgs),
    /// Token-level attribution scores for every record.
    Attribute(AttributeArgs),
    /// Detect self-repair cases and compare ablation estimates.
    SelfRepair(SelfRepairArgs),
    /// Comprehensiveness and sufficiency of one method.
    Faithfulness(FaithfulnessArgs),
    /// Layer attribution with per-layer faithfulness.
    Circuit(CircuitArgs),
    /// Faithfulness of all eight rule combinations.
    Ablation(AblationArgs),
    /// GIM faithfulness across softmax temperatures.
    Sweep(SweepArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum PlantArg {
    None,
    SelfRepair,
    RoutedCircuit,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskArg {
    CopyKey,
    PlantedSentiment,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModeArg {
    /// Replace tokens with the baseline token.
    Token,
    /// Replace residual-stream rows with the layer's positional mean.
    Layer,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct ConfigArgs {
    #[arg(long, default_value_t = ModelConfig::default().vocab_size)]
    pub vocab_size: usize,
    #[arg(long, default_value_t = ModelConfig::default().d_model)]
    pub d_model: usize,
    #[arg(long, default_value_t = ModelConfig::default().n_heads)]
    pub n_heads: usize,
    #[arg(long, default_value_t = ModelConfig::default().d_head)]
    pub d_head: usize,
    #[arg(long, default_value_t = ModelConfig::default().n_layers)]
    pub n_layers: usize,
    #[arg(long, default_value_t = ModelConfig::default().d_mlp)]
    pub d_mlp: usize,
    #[arg(long, default_value_t = ModelConfig::default().max_seq_len)]
    pub max_seq_len: usize,
    #[arg(long, default_value_t = ModelConfig::default().eps_ln)]
    pub eps_ln: f64,
}

impl ConfigArgs {
    pub fn config(&self) -> ModelConfig {
        ModelConfig {
            vocab_size: self.vocab_size,
            d_model: self.d_model,
            n_heads: self.n_heads,
            d_head: self.d_head,
            n_layers: self.n_layers,
            d_mlp: self.d_mlp,
            max_seq_len: self.max_seq_len,
            eps_ln: self.eps_ln,
        }
    }
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct GenModelArgs {
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_enum, default_value_t = PlantArg::None)]
    pub plant: PlantArg,
    #[command(flatten)]
    pub config: ConfigArgs,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct GenDataArgs {
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_enum)]
    pub task: TaskArg,
    /// Number of records.
    #[arg(long)]
    pub n: usize,
    /// Take vocabulary size and maximum length from this weight file.
    #[arg(long)]
    pub weights: Option<PathBuf>,
    #[arg(long, default_value_t = ModelConfig::default().vocab_size)]
    pub vocab_size: usize,
    #[arg(long, default_value_t = ModelConfig::default().max_seq_len)]
    pub max_seq_len: usize,
}

/// Inputs and outputs shared by every evaluation command.
#[derive(Debug, Clone, Args, Serialize)]
pub struct IoArgs {
    /// Weight file written by `gen-model`.
    #[arg(long)]
    pub weights: PathBuf,
    /// JSONL dataset written by `gen-data`.
    #[arg(long)]
    pub data: PathBuf,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Master seed for any sampling the command performs.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct RuleArgs {
    /// Softmax temperature used by `gim`, `atp-star` and the ablation study.
    #[arg(long, default_value_t = gim_core::DEFAULT_TEMPERATURE)]
    pub temperature: f64,
    #[arg(long, default_value_t = gim_core::attribution::DEFAULT_IG_STEPS)]
    pub ig_steps: usize,
    #[arg(long, default_value_t = 0)]
    pub baseline_token: usize,
    /// Temperature-adjusted softmax backward (custom and ig only).
    #[arg(long)]
    pub tsg: Option<f64>,
    /// Freeze the layer-norm scale in the backward pass (custom and ig only).
    #[arg(long)]
    pub ln_freeze: bool,
    /// Halve gradients at multiplicative interactions (custom and ig only).
    #[arg(long)]
    pub grad_norm: bool,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct AttributeArgs {
    #[command(flatten)]
    pub io: IoArgs,
    /// gxi, ig, gim or custom.
    #[arg(long, default_value = "gim")]
    pub method: String,
    #[command(flatten)]
    pub rules: RuleArgs,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct SelfRepairArgs {
    #[command(flatten)]
    pub io: IoArgs,
    #[arg(long, default_value_t = gim_core::DEFAULT_TEMPERATURE)]
    pub temperature: f64,
    #[arg(long, default_value_t = 0.01)]
    pub top_fraction: f64,
    #[arg(long, default_value_t = 0.01)]
    pub significance: f64,
    #[arg(long, default_value_t = 0.1)]
    pub cov_threshold: f64,
    /// Also measure ablations on the logit with full forward passes.
    #[arg(long)]
    pub full_forward: bool,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct FaithfulnessArgs {
    #[command(flatten)]
    pub io: IoArgs,
    /// Token mode: gxi, ig, gim or custom. Layer mode: atp, atp-star, ig or gim.
    #[arg(long, default_value = "gim")]
    pub method: String,
    #[arg(long, value_enum, default_value_t = ModeArg::Token)]
    pub mode: ModeArg,
    #[command(flatten)]
    pub rules: RuleArgs,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct CircuitArgs {
    #[command(flatten)]
    pub io: IoArgs,
    /// atp, atp-star, ig or gim.
    #[arg(long, default_value = "gim")]
    pub method: String,
    #[arg(long, default_value_t = gim_core::DEFAULT_TEMPERATURE)]
    pub temperature: f64,
    #[arg(long, default_value_t = gim_core::attribution::DEFAULT_IG_STEPS)]
    pub ig_steps: usize,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct AblationArgs {
    #[command(flatten)]
    pub io: IoArgs,
    #[arg(long, default_value_t = gim_core::DEFAULT_TEMPERATURE)]
    pub temperature: f64,
    #[arg(long, default_value_t = 0)]
    pub baseline_token: usize,
    #[arg(long, default_value_t = 2000)]
    pub resamples: usize,
    #[arg(long, default_value_t = 0.95)]
    pub confidence: f64,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct SweepArgs {
    #[command(flatten)]
    pub io: IoArgs,
    #[arg(long, value_delimiter = ',', default_values_t = SWEEP_TEMPERATURES.to_vec())]
    pub temperatures: Vec<f64>,
    #[arg(long, default_value_t = 0)]
    pub baseline_token: usize,
}
