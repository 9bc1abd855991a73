use std::path::PathBuf;

use blinknet_tensor::NnError;
use thiserror::Error;

use crate::semantics::IntentState;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Nn(#[from] NnError),

    #[error("argmax of an empty distribution")]
    EmptyDistribution,

    #[error("invalid config field `{field}`: {reason}")]
    Config { field: String, reason: String },

    #[error("missing parameter `{0}`")]
    MissingParam(String),

    #[error("invalid scene: {0}")]
    InvalidScene(String),

    #[error("empty sequence")]
    EmptySequence,

    #[error("length mismatch: {0}")]
    LengthMismatch(String),

    #[error("no training windows for class {0}")]
    MissingClass(IntentState),

    #[error("{path}: parse error at byte {offset}: {detail}")]
    DatasetParse {
        path: PathBuf,
        offset: u64,
        detail: String,
    },

    #[error("{path}: unsupported dataset version {found} (this build reads up to {supported})")]
    UnsupportedVersion {
        path: PathBuf,
        found: u32,
        supported: u32,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("training diverged at epoch {epoch}, step {step}: first non-finite value produced by `{op}` (tape node {node})")]
    Divergence {
        epoch: usize,
        step: usize,
        op: &'static str,
        node: usize,
    },

    #[error("incompatible inputs: {0}")]
    Incompatible(String),
}

impl Error {
    pub(crate) fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            reason: reason.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
