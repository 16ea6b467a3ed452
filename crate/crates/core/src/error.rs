use std::io;
use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("grid mismatch: {0}")]
    GridMismatch(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("forest has no segments to render")]
    EmptyForest,

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// Malformed line in a `key = value` config file.
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },

    /// A config key whose value breaks an invariant.
    #[error("invalid value for `{key}`: {msg}")]
    Validation { key: String, msg: String },

    #[error("malformed pgm: {0}")]
    Pgm(String),

    #[error("sample `{sample}` has no counterpart {path}")]
    MissingFile { sample: String, path: PathBuf },

    #[error("{0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn validation(key: &str, msg: impl Into<String>) -> Self {
        Error::Validation {
            key: key.to_string(),
            msg: msg.into(),
        }
    }
}
