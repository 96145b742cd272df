use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("cannot decode image {path}: {message}")]
    Image { path: PathBuf, message: String },

    #[error("data error: {0}")]
    Data(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("non-finite value in loss term `{term}`")]
    NonFinite { term: String },

    #[error("checkpoint integrity error: {0}")]
    Integrity(String),

    #[error("checkpoint mismatch: {0}")]
    Mismatch(String),

    #[error("pair {pair_id}: {source}")]
    Pair {
        pair_id: String,
        #[source]
        source: Box<Error>,
    },
}

/// Coarse failure class, used by front ends to pick exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Config,
    Data,
    Numeric,
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Annotates an error with the pair it occurred on.
    pub fn for_pair(self, pair_id: &str) -> Self {
        Error::Pair {
            pair_id: pair_id.to_string(),
            source: Box::new(self),
        }
    }

    pub fn class(&self) -> ErrorClass {
        match self {
            Error::Pair { source, .. } => source.class(),
            Error::Config(_) => ErrorClass::Config,
            Error::NonFinite { .. } => ErrorClass::Numeric,
            Error::Io { .. }
            | Error::Image { .. }
            | Error::Data(_)
            | Error::Shape(_)
            | Error::Integrity(_)
            | Error::Mismatch(_) => ErrorClass::Data,
        }
    }
}
