use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter `{field}`: {reason}")]
    InvalidParams { field: &'static str, reason: String },

    #[error("state {state} is not valid for this model: {reason}")]
    InvalidState { state: String, reason: String },

    #[error("policy has no action for state {state} on event {event}")]
    IncompletePolicy { state: String, event: String },

    #[error("linear solve failed: {0}")]
    Solver(String),

    #[error("transform value is not finite at s = {re}+{im}i")]
    Inversion { re: f64, im: f64 },

    #[error("inverted distribution sums to {sum}, outside tolerance")]
    Normalization { sum: f64 },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn params(field: &'static str, reason: impl Into<String>) -> Self {
        Error::InvalidParams {
            field,
            reason: reason.into(),
        }
    }

    /// Configuration-type errors map to CLI exit code 2, the rest to 3.
    pub fn is_config_error(&self) -> bool {
        matches!(
            self,
            Error::InvalidParams { .. } | Error::InvalidState { .. } | Error::Json(_) | Error::Io(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
