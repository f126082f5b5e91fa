use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("empty corpus: no files with extensions {extensions:?} and at least {min_tokens} tokens under {dir}")]
    EmptyCorpus {
        dir: PathBuf,
        extensions: Vec<String>,
        min_tokens: usize,
    },

    #[error("insufficient tokens: sample has {len} tokens, needs at least {needed}")]
    InsufficientTokens { len: usize, needed: usize },

    #[error("context overflow: sequence of {len} tokens exceeds max_seq {max_seq}")]
    ContextOverflow { len: usize, max_seq: usize },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("layer {layer} is not an exit layer of schedule {schedule:?}")]
    NotAnExitLayer { layer: usize, schedule: Vec<usize> },

    #[error("missing loss for exit layer {0}")]
    MissingLayerLoss(usize),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("non-finite loss at step {step}: {detail}")]
    NonFiniteLoss { step: usize, detail: String },

    #[error("episode is finished; call reset before stepping")]
    EpisodeFinished,

    #[error("could not build an episode after {attempts} attempts: {reason}")]
    EpisodeUnavailable { attempts: usize, reason: String },

    #[error("missing artifact {path}: {hint}")]
    MissingArtifact { path: PathBuf, hint: String },

    #[error("unsupported {what} format version {found} (expected {expected})")]
    UnsupportedVersion {
        what: &'static str,
        found: u32,
        expected: u32,
    },

    #[error("malformed {what}: {detail}")]
    Malformed { what: &'static str, detail: String },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::InvalidConfig(msg.into())
    }
}
