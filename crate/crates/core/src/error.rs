use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Broad failure category, used by the CLI to choose an exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Data,
    Numerical,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("{0}")]
    InvalidInput(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("model document: {0}")]
    Document(String),

    #[error("covariance of cluster {cluster} is not positive definite")]
    NotPositiveDefinite { cluster: usize },

    #[error("least-squares system for cluster {cluster} is rank deficient")]
    RankDeficient { cluster: usize },

    #[error("alpha solver produced a non-finite objective at inner iteration {iteration}")]
    AlphaSolver { iteration: usize },

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("all {restarts} restarts diverged: {diagnostics}")]
    AllRestartsDiverged {
        restarts: usize,
        diagnostics: String,
    },

    #[error("every cross-validation cell produced an infinite score")]
    AllCellsInfinite,
}

impl Error {
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::NotPositiveDefinite { .. }
            | Error::RankDeficient { .. }
            | Error::AlphaSolver { .. }
            | Error::NonFinite(_)
            | Error::AllRestartsDiverged { .. }
            | Error::AllCellsInfinite => ErrorKind::Numerical,
            _ => ErrorKind::Data,
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }
}
