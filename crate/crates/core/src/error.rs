use thiserror::Error;

/// Errors produced anywhere in the co-training pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("degenerate scene: all cameras coincide (scale {0:e})")]
    DegenerateScene(f64),

    #[error("point is at or behind the camera (depth {0:.3e})")]
    BehindCamera(f64),

    #[error("invalid action: {0}")]
    InvalidAction(String),

    #[error("data generation failed: {0}")]
    GenerationFailed(String),

    #[error("cannot pair a demonstration record with a static record")]
    CrossKind,

    #[error("empty source: {0}")]
    EmptySource(String),

    #[error("unsupported version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error("corrupt blob {id}: {reason}")]
    CorruptBlob { id: u64, reason: String },

    #[error("missing blob {0}")]
    MissingBlob(u64),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("usage: {0}")]
    Usage(String),

    #[error("non-finite value in loss term `{term}`")]
    NumericFailure { term: String },

    #[error("cannot resume: {0}")]
    Resume(String),

    #[error("malformed file: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
