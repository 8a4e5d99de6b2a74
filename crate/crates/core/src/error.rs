use std::io;

use thiserror::Error;

/// Errors produced anywhere in the crate.
#[derive(Debug, Error)]
pub enum Error {
    /// An input violated a documented precondition.
    #[error("invalid {field}: {reason}")]
    Validation { field: String, reason: String },

    /// A binary or JSON file did not match its declared layout.
    #[error("format error at byte {offset}: {reason}")]
    Format { offset: u64, reason: String },

    /// A run or loss was configured inconsistently.
    #[error("configuration error: {0}")]
    Config(String),

    /// A forward or backward pass produced a non-finite value.
    #[error("non-finite value in {layer}")]
    Numeric { layer: String },

    /// Report assembly failed.
    #[error("report error: {0}")]
    Report(String),

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn validation(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Validation {
            field: field.into(),
            reason: reason.into(),
        }
    }

    pub(crate) fn format(offset: u64, reason: impl Into<String>) -> Self {
        Error::Format {
            offset,
            reason: reason.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
