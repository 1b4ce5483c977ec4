use std::path::PathBuf;

use thiserror::Error;

/// Errors raised by the simulation toolkit.
#[derive(Debug, Error)]
pub enum FtcError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("filter divergence: {0}")]
    FilterDivergence(String),

    #[error("degenerate IMM bank: {0}")]
    DegenerateBank(String),

    #[error("collocation basis construction failed: {0}")]
    BasisConstruction(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("QP infeasible: {0}")]
    QpInfeasible(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error: {0}")]
    Parse(String),
}

pub type Result<T> = std::result::Result<T, FtcError>;

impl FtcError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        FtcError::Io {
            path: path.into(),
            source,
        }
    }
}
