use thiserror::Error;

#[derive(Debug, Error)]
pub enum LiraError {
    /// A caller broke an operation's precondition (shapes, ranges, sizes).
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("invalid config: {field}: {message}")]
    Config { field: String, message: String },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("statistics: {0}")]
    Stats(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, LiraError>;

impl LiraError {
    pub fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        LiraError::Config { field: field.into(), message: message.into() }
    }
}
