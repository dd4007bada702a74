//! Crate-wide error type.

use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Invalid configuration or input data. The message carries a pointer to
    /// the offending key or file location.
    #[error("config error: {0}")]
    Config(String),

    /// The dual solver produced a non-finite gradient or otherwise failed.
    #[error("solver failure: {0}")]
    Solver(String),

    /// A finite instance passed to the oracle is infeasible (or could not be
    /// certified feasible).
    #[error("infeasible instance: {0}")]
    Infeasible(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("csv error on {path}: {source}")]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },
}

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn solver(msg: impl Into<String>) -> Self {
        Error::Solver(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn csv(path: impl Into<PathBuf>, source: csv::Error) -> Self {
        Error::Csv {
            path: path.into(),
            source,
        }
    }

    /// Process exit status for the CLI: config errors exit 2, solver
    /// failures exit 3, everything else maps to config-class errors.
    pub fn exit_code(&self) -> u8 {
        match self {
            Error::Solver(_) => 3,
            _ => 2,
        }
    }
}
