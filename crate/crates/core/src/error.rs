use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("degenerate configuration: {0}")]
    Degenerate(String),

    #[error("optimization failed in {stage}: {reason}")]
    OptimizationFailed { stage: &'static str, reason: String },

    /// Closed-form stage diverged; carries the last iterate for diagnostics.
    #[error("MK solver diverged after {} iterations (cost {})", .last.iterations, .last.cost)]
    MkDiverged { last: Box<crate::mk::MkSolution> },

    #[error("{path}:{line}: parse error: {reason}")]
    Parse {
        path: PathBuf,
        line: usize,
        reason: String,
    },

    #[error("data error: {0}")]
    Data(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
