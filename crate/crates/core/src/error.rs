use thiserror::Error;

/// Errors surfaced by every fallible operation in the crate.
#[derive(Debug, Error)]
pub enum Error {
    /// A configuration value is out of range or missing.
    #[error("configuration error: {0}")]
    Config(String),

    /// A caller broke a documented precondition (shape mismatch, unknown id, ...).
    #[error("contract violation: {0}")]
    Contract(String),

    /// A method cannot run with the inputs it was given (e.g. distillation
    /// without a checkpoint target).
    #[error("method precondition failed: {0}")]
    Precondition(String),

    /// NaN or Inf appeared during a forward or backward pass.
    #[error("numerical error at step {step} (domain {domain:?}): {message}")]
    Numerical {
        step: u64,
        domain: Option<usize>,
        message: String,
    },

    /// A file did not match its declared binary or text format.
    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn config<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Config(msg.into()))
}

pub(crate) fn contract<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Contract(msg.into()))
}
