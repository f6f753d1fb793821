use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: u64,
        msg: String,
    },

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("malformed cache {path}: {msg}")]
    Cache { path: PathBuf, msg: String },

    #[error("cache hash mismatch for {what}: expected {expected}, found {found}")]
    HashMismatch {
        what: String,
        expected: String,
        found: String,
    },

    #[error("eigensolver did not converge for basis {basis}: residual {residual:.3e} after {iterations} iterations")]
    NoConvergence {
        basis: usize,
        residual: f64,
        iterations: usize,
    },

    #[error("numerical failure at {context}: {msg}")]
    Numerical { context: String, msg: String },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::Invalid(msg.into())
    }

    pub fn numerical(context: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Numerical {
            context: context.into(),
            msg: msg.into(),
        }
    }
}
