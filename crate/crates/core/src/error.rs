use thiserror::Error;

pub type Result<T, E = IlsaError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum IlsaError {
    /// Malformed task, layout or numeric configuration.
    #[error("configuration error: {0}")]
    Config(String),

    /// Tensor shapes that do not line up.
    #[error("shape mismatch in {context}: {detail}")]
    Structural { context: String, detail: String },

    /// A caller-side contract was violated (empty dataset, wrong provenance...).
    #[error("precondition failed: {0}")]
    Precondition(String),

    /// Non-finite values during optimisation.
    #[error("training failed: {reason} (first offending parameter: {param})")]
    Training { reason: String, param: String },

    #[error("data format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl IlsaError {
    pub fn config(msg: impl Into<String>) -> Self {
        IlsaError::Config(msg.into())
    }

    pub fn structural(context: impl Into<String>, detail: impl Into<String>) -> Self {
        IlsaError::Structural {
            context: context.into(),
            detail: detail.into(),
        }
    }

    pub fn precondition(msg: impl Into<String>) -> Self {
        IlsaError::Precondition(msg.into())
    }
}
