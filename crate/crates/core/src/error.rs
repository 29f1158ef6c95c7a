use std::path::PathBuf;

use thiserror::Error;

/// Coarse classification used by front ends to pick an exit status.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorCategory {
    /// Bad arguments or configuration.
    Usage,
    /// Missing, malformed or inconsistent input files and datasets.
    Data,
    /// Non-finite values, failed gradient checks and similar.
    Numerical,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("invalid axis {axis} for tensor of rank {rank}")]
    InvalidAxis { axis: usize, rank: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("backward needs a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("tape already consumed by a previous backward pass")]
    TapeConsumed,

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("invalid architecture: {0}")]
    InvalidArch(String),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("parameter {name}: expected shape {expected:?}, found {found:?}")]
    ParameterShape {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },

    #[error("checkpoint {path}: {msg} (byte offset {offset})")]
    Checkpoint {
        path: PathBuf,
        offset: u64,
        msg: String,
    },

    #[error("PGM {path}: {msg}")]
    Pgm { path: PathBuf, msg: String },

    #[error("manifest {path}: {msg}")]
    Manifest { path: PathBuf, msg: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("empty dataset: {0}")]
    EmptyDataset(String),

    #[error("degenerate evaluation set: {0}")]
    Degenerate(String),
}

impl Error {
    pub fn category(&self) -> ErrorCategory {
        match self {
            Error::NonScalarLoss(_) | Error::TapeConsumed | Error::NonFinite(_) => {
                ErrorCategory::Numerical
            }
            Error::InvalidArgument(_) | Error::InvalidArch(_) | Error::InvalidConfig(_) => {
                ErrorCategory::Usage
            }
            Error::ShapeMismatch { .. }
            | Error::InvalidAxis { .. }
            | Error::ParameterShape { .. }
            | Error::Checkpoint { .. }
            | Error::Pgm { .. }
            | Error::Manifest { .. }
            | Error::Io { .. }
            | Error::EmptyDataset(_)
            | Error::Degenerate(_) => ErrorCategory::Data,
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
