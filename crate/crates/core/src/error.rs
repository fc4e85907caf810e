use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("precondition failed: {0}")]
    Precondition(String),

    #[error("parse error at position {position}: {message}")]
    Parse { position: usize, message: String },

    #[error("numeric error in {location}: {message}")]
    Numeric { location: String, message: String },

    #[error("gradient check failed: max relative error {max_rel_err:.3e} exceeds {tolerance:.1e}; worst coordinates: {worst}")]
    Verification {
        max_rel_err: f64,
        tolerance: f64,
        worst: String,
    },

    #[error("training diverged at step {step}: {message}")]
    TrainingFailure {
        step: u64,
        message: String,
        /// Parameters from the last step whose loss was finite.
        last_good: Option<Box<crate::model::Parameters<f32>>>,
    },

    #[error("internal error: {0}")]
    Internal(String),

    #[error("checkpoint format: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub fn precondition(msg: impl Into<String>) -> Self {
        Error::Precondition(msg.into())
    }

    pub fn numeric(location: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Numeric {
            location: location.into(),
            message: msg.into(),
        }
    }
}
