//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Incompatible tensor extents; the message names both shapes.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// Invalid configuration value or range.
    #[error("configuration error: {0}")]
    Config(String),

    /// Out-of-range timestep or element index.
    #[error("index error: {0}")]
    Index(String),

    /// Prompt token that resolves to neither a vocabulary word nor a
    /// registered concept token.
    #[error("vocabulary error: unknown token {0:?}")]
    Vocabulary(String),

    /// Adapter delta incompatible with the projection it targets.
    #[error("adapter error: {0}")]
    Adapter(String),

    /// Concept token already claimed by an earlier task.
    #[error("uniqueness error: concept token {0:?} is already registered")]
    Uniqueness(String),

    /// Corrupt or truncated persisted file; names the failing field.
    #[error("integrity error: {0}")]
    Integrity(String),

    /// Operation requires state that has not been created yet.
    #[error("state error: {0}")]
    State(String),

    /// Caller invoked an operation outside its contract.
    #[error("contract error: {0}")]
    Contract(String),

    /// Non-finite value produced where a finite one is required.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// Expression uses a primitive the gradient engine does not support.
    #[error("capability error: {0}")]
    Capability(String),

    /// Command issued out of order (missing predecessor artifacts).
    #[error("sequencing error: {0}")]
    Sequencing(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}
