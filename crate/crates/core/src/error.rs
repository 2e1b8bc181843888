use thiserror::Error;

/// Errors raised by the fused cross-entropy operators and their harnesses.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("target {target} at position {position} is outside [0, {vocab})")]
    TargetOutOfRange {
        position: usize,
        target: i64,
        vocab: usize,
    },

    #[error("release of {requested} bytes exceeds current ledger balance of {current}")]
    UnderflowRelease { requested: usize, current: usize },

    #[error("target claimed by more than one partial at position {position}")]
    DuplicateTarget { position: usize },

    #[error("target logit never visited at position {position}")]
    TargetNotFound { position: usize },

    #[error("softmax stats cache has {found} entries, expected {expected}")]
    MissingStats { expected: usize, found: usize },

    #[error("upstream gradient does not match reduction: {0}")]
    InconsistentUpstream(String),

    #[error("reduction {0} is not supported on this path")]
    UnsupportedReduction(&'static str),

    #[error("invalid shard layout: {0}")]
    InvalidLayout(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("benchmark grid is empty: {0}")]
    EmptyGrid(&'static str),

    #[error("no records to emit")]
    EmptyInput,
}

pub type Result<T> = std::result::Result<T, Error>;
