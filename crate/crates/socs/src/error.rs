//! Error types shared across the crate.

use std::path::PathBuf;

/// Crate-wide error type.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A configuration value is invalid or inconsistent.
    #[error("config error: {0}")]
    Config(String),

    /// A data structure failed invariant validation. Names the offending field.
    #[error("validation error in `{field}`: {message}")]
    Validation { field: String, message: String },

    /// An on-disk container is malformed (bad magic, truncation, bad header).
    #[error("format error: {0}")]
    Format(String),

    /// An on-disk container has a version this build does not understand.
    #[error("unsupported container version {found} (supported: {supported})")]
    UnsupportedVersion { found: u32, supported: u32 },

    /// I/O failure, carrying the offending path.
    #[error("i/o error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// Numerical failure during computation (non-finite loss, bad domain).
    #[error("numeric error: {0}")]
    Numeric(String),
}

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn validation(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Validation {
            field: field.into(),
            message: message.into(),
        }
    }

    pub fn format(msg: impl Into<String>) -> Self {
        Error::Format(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
