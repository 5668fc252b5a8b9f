//! Command-line options. Every subcommand's options double as its JSON
//! config schema; unknown config keys are rejected. A flag given on the
//! command line wins over the config file, which wins over the default.

use std::fmt;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::de::DeserializeOwned;
use serde::Deserialize;

/// Bad invocation: unreadable config, unknown key, missing input file.
/// Maps to exit status 2.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

pub fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

pub fn require_file(path: &Path, what: &str) -> anyhow::Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(usage(format!("{what} not found: {}", path.display())))
    }
}

pub trait Overlay: Sized + Default + DeserializeOwned {
    fn config_path(&self) -> Option<&Path>;
    fn overlay(self, file: Self) -> Self;

    /// Flags layered over the config file named by `--config`, if any.
    fn resolve(self) -> anyhow::Result<Self> {
        let Some(path) = self.config_path() else {
            return Ok(self);
        };
        require_file(path, "config file")?;
        let text = std::fs::read_to_string(path)?;
        let file: Self =
            serde_json::from_str(&text).map_err(|e| usage(format!("invalid config {}: {e}", path.display())))?;
        Ok(self.overlay(file))
    }
}

macro_rules! overlay {
    ($t:ty { $($f:ident),* $(,)? }) => {
        impl Overlay for $t {
            fn config_path(&self) -> Option<&Path> {
                self.config.as_deref()
            }

            fn overlay(self, file: Self) -> Self {
                Self { config: self.config, $($f: self.$f.or(file.$f)),* }
            }
        }
    };
}

#[derive(Debug, Parser)]
#[command(name = "dhsa", version, about = "Dynamic hierarchical sparse attention toolkit")]
pub struct Cli {
    /// Worker threads; affects wall time only [default: all cores]
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a planted-segment corpus
    Gen(GenOpts),
    /// Derive boundary labels from a corpus's attention matrices
    Label(LabelOpts),
    /// Train the boundary predictor on labeled sequences
    Train(TrainOpts),
    /// Write sparsity masks for every sequence of a corpus
    Mask(MaskOpts),
    /// Compare dense, static and dynamic masks on a corpus
    Compare(CompareOpts),
    /// Check predictor gradients against finite differences
    Gradcheck(GradcheckOpts),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FocalFormArg {
    Standard,
    Verbatim,
}

impl From<FocalFormArg> for dhsa::predictor::FocalForm {
    fn from(f: FocalFormArg) -> Self {
        match f {
            FocalFormArg::Standard => Self::Standard,
            FocalFormArg::Verbatim => Self::Verbatim,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadAggArg {
    Max,
    Mean,
}

impl From<HeadAggArg> for dhsa::chunk_repr::HeadAggregation {
    fn from(h: HeadAggArg) -> Self {
        match h {
            HeadAggArg::Max => Self::Max,
            HeadAggArg::Mean => Self::Mean,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LogBaseArg {
    E,
    Ten,
}

impl From<LogBaseArg> for dhsa::labeling::LogBase {
    fn from(b: LogBaseArg) -> Self {
        match b {
            LogBaseArg::E => Self::E,
            LogBaseArg::Ten => Self::Ten,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskMethodArg {
    /// NMS over trained predictor scores (needs --predictor)
    Dhsa,
    /// Planted segment boundaries
    Oracle,
    /// Fixed-size chunks
    Static,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskFormatArg {
    Binary,
    Json,
}

#[derive(Debug, Default, Args, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenOpts {
    /// JSON config file with any of the options below
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    /// Output directory [default: corpus]
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Sequences to generate [default: 100]
    #[arg(long)]
    pub num_sequences: Option<usize>,
    /// Tokens per sequence [default: 512]
    #[arg(long)]
    pub len: Option<usize>,
    /// Per-head query/key/value width [default: 32]
    #[arg(long)]
    pub dim: Option<usize>,
    /// Attention heads [default: 4]
    #[arg(long)]
    pub heads: Option<usize>,
    /// Planted segments per sequence [default: 8]
    #[arg(long)]
    pub num_segments: Option<usize>,
    /// Mean attention fraction leaking into the previous segment [default: 0.05]
    #[arg(long)]
    pub leakage: Option<f64>,
    /// RNG seed [default: 0]
    #[arg(long)]
    pub seed: Option<u64>,
}

overlay!(GenOpts { out, num_sequences, len, dim, heads, num_segments, leakage, seed });

#[derive(Debug, Default, Args, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LabelOpts {
    /// JSON config file with any of the options below
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    /// Corpus directory written by `gen` [default: corpus]
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    /// Output directory [default: labels]
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Rows on each side of a candidate position [default: 4]
    #[arg(long)]
    pub window: Option<usize>,
    /// Ratio regularizer [default: 0.001]
    #[arg(long)]
    pub epsilon: Option<f64>,
    /// Minimum ratio for a hard boundary [default: 1.1]
    #[arg(long)]
    pub theta: Option<f64>,
    /// Maximum chunks per sequence [default: planted segment count]
    #[arg(long)]
    pub max_chunks: Option<usize>,
    /// Soft-label sharpness [default: 2.0]
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Soft-label log offset [default: 1e-6]
    #[arg(long)]
    pub zeta: Option<f64>,
    /// Logarithm base of the soft label and its ln 2 offset [default: e]
    #[arg(long, value_enum)]
    pub log_base: Option<LogBaseArg>,
}

overlay!(LabelOpts { corpus, out, window, epsilon, theta, max_chunks, alpha, zeta, log_base });

#[derive(Debug, Default, Args, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainOpts {
    /// JSON config file with any of the options below
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    /// Training corpus directory [default: corpus]
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    /// Label file for the training corpus [default: labels/labels.jsonl]
    #[arg(long)]
    pub labels: Option<PathBuf>,
    /// Held-out corpus for per-epoch metrics [default: training corpus]
    #[arg(long)]
    pub eval_corpus: Option<PathBuf>,
    /// Label file for the held-out corpus
    #[arg(long)]
    pub eval_labels: Option<PathBuf>,
    /// Output directory [default: predictor]
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Passes over the training set [default: 50]
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Sequences per optimizer step [default: 1]
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Adam learning rate [default: 0.001]
    #[arg(long)]
    pub lr: Option<f64>,
    /// Focal exponent [default: 2.0]
    #[arg(long)]
    pub gamma: Option<f64>,
    /// Positive-class weight [default: 1.3]
    #[arg(long)]
    pub w_pos: Option<f64>,
    /// Focal modulating form [default: standard]
    #[arg(long, value_enum)]
    pub focal_form: Option<FocalFormArg>,
    /// Encoder attention heads [default: 8]
    #[arg(long)]
    pub heads: Option<usize>,
    /// MLP hidden width [default: 256]
    #[arg(long)]
    pub hidden: Option<usize>,
    /// Keys on each side of a position [default: 4]
    #[arg(long)]
    pub window: Option<usize>,
    /// Learned position biases inside each window [default: false]
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub positional: Option<bool>,
    /// Top-K overlap size cap [default: 500]
    #[arg(long)]
    pub top_k: Option<usize>,
    /// Seed for initialization and shuffling [default: 0]
    #[arg(long)]
    pub seed: Option<u64>,
}

overlay!(TrainOpts {
    corpus, labels, eval_corpus, eval_labels, out, epochs, batch_size, lr, gamma, w_pos, focal_form, heads,
    hidden, window, positional, top_k, seed,
});

#[derive(Debug, Default, Args, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MaskOpts {
    /// JSON config file with any of the options below
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    /// Corpus directory [default: corpus]
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    /// Output directory [default: masks]
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Boundary source [default: dhsa]
    #[arg(long, value_enum)]
    pub method: Option<MaskMethodArg>,
    /// Predictor checkpoint, required by the dhsa method
    #[arg(long)]
    pub predictor: Option<PathBuf>,
    /// Keys kept per query row [default: L/8]
    #[arg(long)]
    pub budget: Option<usize>,
    /// Static chunk size [default: L / planted segment count]
    #[arg(long)]
    pub chunk_size: Option<usize>,
    /// NMS confidence floor [default: 0.1]
    #[arg(long)]
    pub min_conf: Option<f64>,
    /// NMS suppression radius [default: 8]
    #[arg(long)]
    pub nms_window: Option<usize>,
    /// Maximum chunks from NMS [default: planted segment count]
    #[arg(long)]
    pub max_chunks: Option<usize>,
    /// Merge of per-head chunk scores [default: max]
    #[arg(long, value_enum)]
    pub head_agg: Option<HeadAggArg>,
    /// Mask file format [default: binary]
    #[arg(long, value_enum)]
    pub format: Option<MaskFormatArg>,
}

overlay!(MaskOpts {
    corpus, out, method, predictor, budget, chunk_size, min_conf, nms_window, max_chunks, head_agg, format,
});

#[derive(Debug, Default, Args, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CompareOpts {
    /// JSON config file with any of the options below
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    /// Corpus directory [default: corpus]
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    /// Output directory [default: report]
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Predictor checkpoint; adds the dhsa method when given
    #[arg(long)]
    pub predictor: Option<PathBuf>,
    /// Directory written by `mask`; adds its masks as a method
    #[arg(long)]
    pub masks: Option<PathBuf>,
    /// Keys kept per query row [default: L/8]
    #[arg(long)]
    pub budget: Option<usize>,
    /// Budgets for the recall curve, comma-separated [default: L/8,L/4]
    #[arg(long, value_delimiter = ',')]
    pub curve_budgets: Option<Vec<usize>>,
    /// Static chunk size [default: L / planted segment count]
    #[arg(long)]
    pub chunk_size: Option<usize>,
    /// NMS confidence floor [default: 0.1]
    #[arg(long)]
    pub min_conf: Option<f64>,
    /// NMS suppression radius [default: 8]
    #[arg(long)]
    pub nms_window: Option<usize>,
    /// Maximum chunks from NMS [default: planted segment count]
    #[arg(long)]
    pub max_chunks: Option<usize>,
    /// Merge of per-head chunk scores [default: max]
    #[arg(long, value_enum)]
    pub head_agg: Option<HeadAggArg>,
    /// Include wall time in the reports (breaks byte reproducibility) [default: false]
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub timing: Option<bool>,
}

overlay!(CompareOpts {
    corpus, out, predictor, masks, budget, curve_budgets, chunk_size, min_conf, nms_window, max_chunks, head_agg,
    timing,
});

#[derive(Debug, Default, Args, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GradcheckOpts {
    /// JSON config file with any of the options below
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    /// Output directory [default: gradcheck]
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Checkpoint to check; a fresh initialization is used otherwise
    #[arg(long)]
    pub predictor: Option<PathBuf>,
    /// Key width of a fresh predictor [default: 16]
    #[arg(long)]
    pub dim: Option<usize>,
    /// Encoder attention heads of a fresh predictor [default: 8]
    #[arg(long)]
    pub heads: Option<usize>,
    /// MLP hidden width of a fresh predictor [default: 256]
    #[arg(long)]
    pub hidden: Option<usize>,
    /// Window of a fresh predictor [default: 4]
    #[arg(long)]
    pub window: Option<usize>,
    /// Position biases in a fresh predictor [default: false]
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub positional: Option<bool>,
    /// Random sequences in the batch [default: 2]
    #[arg(long)]
    pub batch: Option<usize>,
    /// Tokens per random sequence [default: 24]
    #[arg(long)]
    pub len: Option<usize>,
    /// Central-difference step [default: 1e-4]
    #[arg(long)]
    pub step: Option<f64>,
    /// Weights sampled per parameter block [default: 24]
    #[arg(long)]
    pub samples: Option<usize>,
    /// Largest acceptable relative error [default: 1e-4]
    #[arg(long)]
    pub tolerance: Option<f64>,
    /// Focal exponent [default: 2.0]
    #[arg(long)]
    pub gamma: Option<f64>,
    /// Positive-class weight [default: 1.3]
    #[arg(long)]
    pub w_pos: Option<f64>,
    /// Focal modulating form [default: standard]
    #[arg(long, value_enum)]
    pub focal_form: Option<FocalFormArg>,
    /// RNG seed [default: 0]
    #[arg(long)]
    pub seed: Option<u64>,
}

overlay!(GradcheckOpts {
    out, predictor, dim, heads, hidden, window, positional, batch, len, step, samples, tolerance, gamma, w_pos,
    focal_form, seed,
});
