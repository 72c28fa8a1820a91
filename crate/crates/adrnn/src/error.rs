//! Error types shared across the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum AdrnnError {
    #[error("shape mismatch: {op} got {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op}: invalid argument: {msg}")]
    InvalidArgument { op: &'static str, msg: String },

    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },

    #[error("backward called on an already-consumed tape")]
    TapeConsumed,

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("generation budget exceeded after {attempts} attempts")]
    GenerationBudgetExceeded { attempts: usize },

    #[error("shard format error: {0}")]
    ShardFormat(String),

    #[error("checksum failure for blob '{blob}': stored {stored:#010x}, computed {computed:#010x}")]
    ChecksumFailure {
        blob: String,
        stored: u32,
        computed: u32,
    },

    #[error("unsupported format version {found} (expected {expected})")]
    FormatVersion { found: u32, expected: u32 },

    #[error("config error: {0}")]
    Config(String),

    #[error("training diverged: {0}")]
    Diverged(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, AdrnnError>;
