use std::path::PathBuf;

use hnf_autodiff::AutodiffError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] AutodiffError),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },

    #[error("bundle tensor `{tensor}`: {reason}")]
    Bundle { tensor: String, reason: String },

    #[error("invalid corpus: {0}")]
    Corpus(String),

    #[error("invalid synthetic spec: {0}")]
    Synthetic(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("zero-norm vector in {0}")]
    ZeroNorm(String),

    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error("non-finite loss at step {step}: {detail}")]
    NonFiniteLoss { step: usize, detail: String },

    #[error("non-finite similarity entry at ({row}, {col})")]
    NonFiniteSimilarity { row: usize, col: usize },

    #[error("missing ground truth for queries: {0:?}")]
    MissingGroundTruth(Vec<String>),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn json(path: impl Into<PathBuf>, source: serde_json::Error) -> Self {
        Error::Json {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn bundle(tensor: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Bundle {
            tensor: tensor.into(),
            reason: reason.into(),
        }
    }
}
