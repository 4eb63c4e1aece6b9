use thiserror::Error;

/// Errors surfaced by the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// The ground-truth box cannot serve as a regression target (zero width or height).
    #[error("invalid target: {0}")]
    InvalidTarget(String),

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("schema error: {0}")]
    Schema(String),

    #[error("usage error: {0}")]
    Usage(String),

    /// A loss term became NaN or infinite during training.
    #[error("numerical abort at example {example} ({term}): {detail}")]
    Numerical {
        example: usize,
        term: &'static str,
        detail: String,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidInput(msg.into())
}
