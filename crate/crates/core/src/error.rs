use thiserror::Error;

/// Errors raised by the simulation and verification pipelines.
#[derive(Debug, Error)]
pub enum Error {
    /// Input rejected before any computation started.
    #[error("invalid input: {0}")]
    InvalidInput(String),
    /// Scenario configuration problem, tagged with the offending field path.
    #[error("config field `{field}`: {message}")]
    Config { field: String, message: String },
    /// Non-finite values or a regression that could not be rescued.
    #[error("numerical abort at step {step}: {reason}")]
    Numerical { step: usize, reason: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub(crate) fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            message: message.into(),
        }
    }

    pub(crate) fn numerical(step: usize, reason: impl Into<String>) -> Self {
        Error::Numerical {
            step,
            reason: reason.into(),
        }
    }
}
