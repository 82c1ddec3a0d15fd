use std::io;

use thiserror::Error;

/// Errors raised by the prompt-bank pipeline.
#[derive(Debug, Error)]
pub enum CakiError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("not found: {0}")]
    NotFound(String),

    #[error("unsupported operation: {0}")]
    Unsupported(String),

    #[error("format error at byte {offset}: {message}")]
    Format { offset: u64, message: String },

    #[error("fingerprint mismatch: bank was built for {bank}, encoder is {encoder}")]
    FingerprintMismatch { bank: String, encoder: String },

    #[error("prompt bank is empty")]
    EmptyBank,

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl CakiError {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        CakiError::InvalidArgument(msg.into())
    }

    pub(crate) fn format(offset: u64, msg: impl Into<String>) -> Self {
        CakiError::Format {
            offset,
            message: msg.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, CakiError>;
