//! Error type shared across the crate.

/// Errors raised by loaders, model contracts, and the training pipeline.
#[derive(Debug, thiserror::Error)]
pub enum JamError {
    /// Shape contract violation (matrix/vector dimensions disagree).
    #[error("dimension mismatch: {0}")]
    DimMismatch(String),

    /// Malformed on-disk data (bad magic, version, truncated payload).
    #[error("format error: {0}")]
    Format(String),

    /// Two inputs that must be aligned row-for-row are not.
    #[error("alignment error: {0}")]
    Alignment(String),

    /// Values are structurally valid but semantically unusable
    /// (non-finite floats, unresolvable ids, out-of-range indices).
    #[error("data error: {0}")]
    Data(String),

    /// Invalid configuration (counts, ranges, k vs N_mod).
    #[error("config error: {0}")]
    Config(String),

    /// Softmax over logits with no finite entry.
    #[error("empty support: {0}")]
    EmptySupport(String),

    /// Chronological split requires at least three distinct UTC days.
    #[error("insufficient temporal span: {0}")]
    TemporalSpan(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, JamError>;
