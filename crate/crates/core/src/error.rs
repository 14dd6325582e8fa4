// SPDX-License-Identifier: MIT OR Apache-2.0

use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, IcrError>;

#[derive(Debug, Error)]
pub enum IcrError {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },

    #[error("unsupported version {0}")]
    UnsupportedVersion(u32),

    #[error("truncated payload: {0}")]
    Truncated(String),

    #[error("directory out of bounds: {0}")]
    DirectoryOutOfBounds(String),

    #[error("malformed header: {0}")]
    Header(String),

    #[error("invalid record: {field}: {message}")]
    Invariant { field: String, message: String },

    #[error("non-finite input at index {index}")]
    NonFinite { index: usize },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("zero-norm context hidden state at token {token}")]
    ZeroNorm { token: usize },

    #[error("not a probability distribution: {0}")]
    NotADistribution(String),

    #[error("index out of range: {0}")]
    OutOfRange(String),

    #[error("empty answer span")]
    EmptySpan,

    #[error("single-class labels: both classes must be present")]
    SingleClass,

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("train-mode forward needs a batch of at least 2 rows, got {0}")]
    BatchTooSmall(usize),

    #[error("missing tensor {0:?}")]
    MissingTensor(String),

    #[error("nonpositive kernel diagonal at layer {layer}, head {head}, position {position}")]
    NonPositiveDiagonal { layer: usize, head: usize, position: usize },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("csv error: {0}")]
    Csv(String),
}

impl IcrError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        IcrError::Io { path: path.into(), source }
    }

    pub(crate) fn invariant(field: impl Into<String>, message: impl Into<String>) -> Self {
        IcrError::Invariant { field: field.into(), message: message.into() }
    }
}
