use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("non-finite value at {location}")]
    NonFinite { location: String },

    #[error("negative value {value} at {location}")]
    Negative { value: f64, location: String },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("unknown land-cover code {code}")]
    UnknownCode { code: u32 },

    #[error("{path}:{row}: {message}")]
    ManifestRow {
        path: PathBuf,
        row: usize,
        message: String,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("checkpoint mismatch: {0}")]
    Checkpoint(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for mid-run numeric failures (exit code 3); everything else is
    /// treated as a configuration/input error (exit code 2).
    pub fn is_numeric(&self) -> bool {
        matches!(self, Error::Numeric(_) | Error::NonFinite { .. })
    }
}
