use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = FlError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum FlError {
    /// Two parameter sets (or a matrix and a client list) disagree on shape.
    #[error("structure mismatch at layer `{layer}`: {detail}")]
    Structure { layer: String, detail: String },

    #[error("empty federation: at least one client update is required")]
    EmptyFederation,

    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error("insufficient data: {samples} samples cannot fill {clients} client shards")]
    InsufficientData { samples: usize, clients: usize },

    #[error("cannot split {0} samples into non-empty train and test sets")]
    EmptySplit(usize),

    #[error("bad IDX magic: expected {expected:#010x}, found {observed:#010x}")]
    Format { expected: u32, observed: u32 },

    #[error("IDX data truncated: need {needed} bytes, have {available}")]
    Length { needed: usize, available: usize },

    #[error("inconsistent IDX pair: {images} images but {labels} labels")]
    Consistency { images: usize, labels: usize },

    #[error("invalid value: {0}")]
    InvalidArgument(String),

    #[error("config error on `{key}`: {reason}")]
    Config { key: String, reason: String },

    #[error("round {round} failed: {source}")]
    Round {
        round: usize,
        #[source]
        source: Box<FlError>,
    },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("corrupt file {path}: {reason}")]
    Corrupt { path: PathBuf, reason: String },
}

impl FlError {
    pub(crate) fn structure(layer: impl Into<String>, detail: impl Into<String>) -> Self {
        FlError::Structure {
            layer: layer.into(),
            detail: detail.into(),
        }
    }

    pub(crate) fn config(key: impl Into<String>, reason: impl Into<String>) -> Self {
        FlError::Config {
            key: key.into(),
            reason: reason.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        FlError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn is_config(&self) -> bool {
        matches!(self, FlError::Config { .. })
    }
}
