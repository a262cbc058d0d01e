use thiserror::Error;

/// Errors raised across the solver.
#[derive(Debug, Error)]
pub enum SdzeError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("config validation failed: {}", .0.join("; "))]
    Validation(Vec<String>),

    #[error(
        "non-finite loss at step {step}: loss_plus={loss_plus}, loss_minus={loss_minus} (replay: {replay})"
    )]
    NonFinite {
        step: u64,
        loss_plus: f64,
        loss_minus: f64,
        replay: String,
    },

    #[error("degenerate metric: {0}")]
    DegenerateMetric(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, SdzeError>;

pub(crate) fn invalid<T>(msg: impl Into<String>) -> Result<T> {
    Err(SdzeError::InvalidArgument(msg.into()))
}
