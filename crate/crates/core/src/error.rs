use thiserror::Error;

pub type Result<T, E = NmsError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum NmsError {
    #[error("invalid {field}: {reason}")]
    InvalidInput { field: &'static str, reason: String },

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    /// The engine needs data the input does not carry (e.g. anchor metadata).
    #[error("unsupported input: {0}")]
    Unsupported(String),

    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl NmsError {
    pub(crate) fn invalid(field: &'static str, reason: impl Into<String>) -> Self {
        Self::InvalidInput { field, reason: reason.into() }
    }

    pub(crate) fn config(reason: impl Into<String>) -> Self {
        Self::InvalidConfig(reason.into())
    }
}
