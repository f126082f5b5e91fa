//! Flag sets. Every field is optional so that the config file can fill it;
//! defaults are applied in `commands`.

use std::path::PathBuf;

use clap::{Args, ValueEnum};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    Large,
    Small,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Keep {
    Best,
    Last,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EvalSplit {
    Validation,
    Test,
}

#[derive(Debug, Default, Args, Serialize, Deserialize)]
pub struct SynthCorpusArgs {
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Number of files [default: 200]
    #[arg(long)]
    pub files: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Default, Args, Serialize, Deserialize)]
pub struct IngestArgs {
    #[arg(long)]
    pub corpus_dir: Option<PathBuf>,
    /// Comma-separated file extensions [default: py,rs,java]
    #[arg(long, value_delimiter = ',')]
    pub extensions: Option<Vec<String>>,
    /// train,validation,test [default: 0.8,0.1,0.1]
    #[arg(long, value_delimiter = ',')]
    pub split_ratios: Option<Vec<f64>>,
    /// Files shorter than this many tokens are dropped [default: 32]
    #[arg(long)]
    pub min_tokens: Option<usize>,
    /// Manifest output path [default: artifacts/manifest.json]
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Default, Args, Serialize, Deserialize)]
pub struct TrainLiteArgs {
    /// [default: artifacts/manifest.json]
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Checkpoint output [default: artifacts/lite.ckpt]
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Loss-history CSV [default: artifacts/loss_history.csv]
    #[arg(long)]
    pub loss_history: Option<PathBuf>,
    /// Put the whole loss budget on the final layer (baseline model).
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub base: Option<bool>,
    #[arg(long)]
    pub n_layers: Option<usize>,
    #[arg(long)]
    pub d_model: Option<usize>,
    #[arg(long)]
    pub n_heads: Option<usize>,
    #[arg(long)]
    pub ffn_mult: Option<usize>,
    #[arg(long)]
    pub max_seq: Option<usize>,
    /// [default: 2]
    #[arg(long)]
    pub earliest_exit: Option<usize>,
    /// [default: 2]
    #[arg(long)]
    pub first_half_stride: Option<usize>,
    /// [default: 2]
    #[arg(long)]
    pub second_half_stride: Option<usize>,
    /// first_half,second_half,final [default: 0.7,0.2,0.1]
    #[arg(long, value_delimiter = ',')]
    pub budgets: Option<Vec<f64>>,
    /// Geometric decay of weights within a half [default: 0.9]
    #[arg(long)]
    pub decay: Option<f64>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub grad_accum_steps: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub max_steps: Option<usize>,
    #[arg(long)]
    pub block_len: Option<usize>,
    #[arg(long)]
    pub grad_clip: Option<f64>,
    /// Log every N optimizer steps [default: 10]
    #[arg(long)]
    pub log_every: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Default, Args, Serialize, Deserialize)]
pub struct TrainRlArgs {
    /// [default: artifacts/lite.ckpt]
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// [default: artifacts/manifest.json]
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Policy checkpoint output [default: artifacts/policy.ckpt.json]
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Which policy to write [default: best]
    #[arg(long, value_enum)]
    pub keep: Option<Keep>,
    /// [default: artifacts/reward_curve.csv]
    #[arg(long)]
    pub reward_curve: Option<PathBuf>,
    /// Episode trace JSONL of greedy rollouts after training [default: artifacts/episode_trace.jsonl]
    #[arg(long)]
    pub trace: Option<PathBuf>,
    /// [default: 1]
    #[arg(long)]
    pub trace_episodes: Option<usize>,
    /// PPO hyperparameter preset [default: large]
    #[arg(long, value_enum)]
    pub preset: Option<Preset>,
    #[arg(long)]
    pub total_steps: Option<usize>,
    #[arg(long)]
    pub rollout_buffer_size: Option<usize>,
    #[arg(long)]
    pub minibatch_size: Option<usize>,
    #[arg(long)]
    pub epochs_per_update: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub hidden_layers: Option<usize>,
    #[arg(long)]
    pub hidden_units: Option<usize>,
    /// Generated tokens per episode [default: 16]
    #[arg(long)]
    pub tokens_per_episode: Option<usize>,
    /// [default: 512]
    #[arg(long)]
    pub max_context: Option<usize>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub beta: Option<f64>,
    #[arg(long)]
    pub gamma: Option<f64>,
    #[arg(long)]
    pub epsilon: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Default, Args, Serialize, Deserialize)]
pub struct ExportPolicyArgs {
    /// [default: artifacts/policy.ckpt.json]
    #[arg(long)]
    pub policy_checkpoint: Option<PathBuf>,
    /// [default: artifacts/policy.json]
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
}

/// Options shared by `eval` and `fixed-exit-sweep`.
#[derive(Debug, Default, Args, Serialize, Deserialize)]
pub struct SampleArgs {
    /// [default: artifacts/lite.ckpt]
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// [default: artifacts/manifest.json]
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// [default: test]
    #[arg(long, value_enum)]
    pub split: Option<EvalSplit>,
    #[arg(long)]
    pub n_samples: Option<usize>,
    #[arg(long)]
    pub context_fraction: Option<f64>,
    #[arg(long)]
    pub max_new: Option<usize>,
    #[arg(long)]
    pub max_context: Option<usize>,
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub kv_cache: Option<bool>,
    #[arg(long)]
    pub keyword_weight: Option<f64>,
    /// Keyword list, one per line [default: built-in Python keywords]
    #[arg(long)]
    pub keywords: Option<PathBuf>,
    /// Also write an SVG plot next to the report.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub svg: Option<bool>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Default, Args, Serialize, Deserialize)]
pub struct EvalArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub common: SampleArgs,
    /// Final-layer-only baseline checkpoint.
    #[arg(long)]
    pub base_checkpoint: Option<PathBuf>,
    /// [default: artifacts/policy.json]
    #[arg(long)]
    pub policy: Option<PathBuf>,
    /// [default: 0.6,0.8,0.9,0.91,0.92]
    #[arg(long, value_delimiter = ',')]
    pub thresholds: Option<Vec<f64>>,
    /// Untimed generations before measuring [default: 3]
    #[arg(long)]
    pub warmup: Option<usize>,
    /// Report path without extension [default: artifacts/report]
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Also run the controller-overhead harness.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub overhead: Option<bool>,
}

#[derive(Debug, Default, Args, Serialize, Deserialize)]
pub struct SweepArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub common: SampleArgs,
    /// [default: artifacts/sweep.csv]
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Default, Args, Serialize, Deserialize)]
pub struct ServeArgs {
    /// [default: 127.0.0.1:8080]
    #[arg(long)]
    pub bind: Option<String>,
    /// [default: artifacts/lite.ckpt]
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// [default: artifacts/policy.json]
    #[arg(long)]
    pub policy: Option<PathBuf>,
    /// [default: 0.9]
    #[arg(long)]
    pub default_threshold: Option<f64>,
    /// [default: 30]
    #[arg(long)]
    pub request_timeout_secs: Option<f64>,
    /// [default: 4]
    #[arg(long)]
    pub max_concurrent: Option<usize>,
    /// [default: 15]
    #[arg(long)]
    pub default_max_new_tokens: Option<usize>,
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub kv_cache: Option<bool>,
    /// Accepted for uniformity; generation is greedy and does not draw randomness.
    #[arg(long)]
    pub seed: Option<u64>,
}
