//! Crate-wide error type.
//!
//! Every variant maps onto one of the documented CLI exit codes through
//! [`Error::exit_code`].

use std::path::PathBuf;

use crate::tracing::ExclusionCounts;

/// Result alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch: {op} got {left:?} and {right:?}")]
    Shape {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },

    #[error("length mismatch in {op}: expected {expected}, got {got}")]
    Length {
        op: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("{op} on empty input")]
    Empty { op: &'static str },

    #[error("non-finite value at site {site}, position {position}")]
    NonFinite { site: usize, position: usize },

    #[error("index out of range: {what} = {index}, limit {limit}")]
    OutOfRange {
        what: &'static str,
        index: usize,
        limit: usize,
    },

    #[error("invalid config: {0}")]
    Config(String),

    #[error("invalid sequence: {0}")]
    Sequence(String),

    #[error("invalid intervention: {0}")]
    Intervention(String),

    #[error("no valid samples ({0})")]
    NoValidSamples(ExclusionCounts),

    #[error("recovery gap {gap:e} is not above epsilon {epsilon:e}")]
    NoGap { gap: f64, epsilon: f64 },

    #[error("format error in {path}: {message}")]
    Format { path: String, message: String },

    #[error("cannot access {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("empty dataset")]
    EmptyDataset,
}

impl Error {
    pub(crate) fn format(path: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            message: message.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for the `trace` binary.
    ///
    /// | code | meaning |
    /// |------|---------|
    /// | 2    | command-line usage error (emitted by the argument parser) |
    /// | 3    | unreadable or unwritable file |
    /// | 4    | malformed weight container, dataset or results document |
    /// | 5    | every sample excluded by the validity filter |
    /// | 6    | invalid configuration or oracle spec |
    /// | 7    | model/runtime failure (shape mismatch, non-finite values, bad patch) |
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Io { .. } => 3,
            Error::Format { .. } => 4,
            Error::NoValidSamples(_) => 5,
            Error::Config(_) | Error::EmptyDataset => 6,
            _ => 7,
        }
    }
}
