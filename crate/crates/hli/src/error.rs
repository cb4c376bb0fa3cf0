use thiserror::Error;

/// Errors surfaced by dataset generation, model evaluation and training.
#[derive(Debug, Error)]
pub enum HliError {
    #[error("invalid dataset spec: {0}")]
    InvalidSpec(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("clustering failed: {0}")]
    Clustering(String),

    #[error("non-finite value in {term} at step {step}")]
    NonFinite { term: String, step: usize },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("config error in field `{field}`: {reason}")]
    Config { field: String, reason: String },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, HliError>;
