//! Crate-wide error type.

use thiserror::Error;

/// Errors surfaced by the library.
#[derive(Debug, Error)]
pub enum SdcqlError {
    /// An agent's action violates its availability mask.
    #[error("agent {agent}: action {action} is not available")]
    UnavailableAction { agent: usize, action: usize },

    /// A task specification violates its invariants.
    #[error("invalid task spec: {0}")]
    InvalidTaskSpec(String),

    /// An observation vector does not match the task schema.
    #[error("schema mismatch: {0}")]
    SchemaError(String),

    /// Tensor shapes do not line up.
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    /// A file has the wrong magic, version, or structure.
    #[error("format error: {0}")]
    FormatError(String),

    /// A file failed its checksum or is truncated.
    #[error("integrity error: {0}")]
    IntegrityError(String),

    /// A dataset operation needs at least one episode.
    #[error("dataset is empty")]
    EmptyDataset,

    /// A dataset action is marked unavailable in its own mask.
    #[error("data action {action} unavailable for agent {agent}")]
    DataActionUnavailable { agent: usize, action: usize },

    /// A hyperparameter is outside its allowed range.
    #[error("range error: {0}")]
    RangeError(String),

    /// Mutually exclusive ablation/baseline flags were combined.
    #[error("conflicting flags: {0}")]
    ConflictingFlags(String),

    /// Too few points for a projection.
    #[error("too few points: need at least {need}, got {got}")]
    TooFewPoints { need: usize, got: usize },

    /// Unknown task id.
    #[error("unknown task: {0}")]
    UnknownTask(String),

    /// An I/O error with context.
    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },

    /// Invalid configuration.
    #[error("invalid config: {0}")]
    InvalidConfig(String),
}

impl SdcqlError {
    pub fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        SdcqlError::Io {
            context: context.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, SdcqlError>;
