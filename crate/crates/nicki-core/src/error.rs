//! Crate-wide error type.

use thiserror::Error;

/// Errors surfaced by the library.
#[derive(Debug, Error)]
pub enum Error {
    /// Matrix/vector dimensions do not line up for the requested operation.
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    /// A parameter value is outside its legal range.
    #[error("invalid parameter: {0}")]
    Parameter(String),

    /// An API contract was violated (e.g. backward on a spent tape).
    #[error("contract violation: {0}")]
    Contract(String),

    /// A numeric domain violation that the guards could not absorb.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// Malformed input file; carries the 1-based line number when known.
    #[error("parse error in {path} at line {line}: {msg}")]
    Parse {
        path: String,
        line: usize,
        msg: String,
    },

    /// Invalid run configuration (bad class ids, infeasible settings, ...).
    #[error("configuration error: {0}")]
    Config(String),

    /// A perturbation budget cannot be satisfied.
    #[error("budget error: {0}")]
    Budget(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
