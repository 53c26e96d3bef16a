use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("invalid tensor: {0}")]
    Tensor(String),
    #[error("unknown elementwise op `{0}`")]
    UnknownOp(String),
    #[error("empty input: {0}")]
    Empty(&'static str),
    #[error("non-finite gradient for parameter `{name}` at index {index}")]
    NonFiniteGradient { name: String, index: usize },
    #[error("validation error: {0}")]
    Validation(String),
    #[error("site `{site}` has {available} windows, need more than {needed}")]
    TooFewWindows {
        site: String,
        available: usize,
        needed: usize,
    },
    #[error("config error: {0}")]
    Config(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by bad input data rather than a failed computation.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Validation(_) | Error::Csv(_) | Error::TooFewWindows { .. } | Error::Empty(_)
        )
    }
}
