use thiserror::Error;

/// Errors raised across the quantization, spectral and training layers.
#[derive(Debug, Error)]
pub enum Error {
    #[error("non-finite value {value} at {context}")]
    NonFinite { value: f64, context: String },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("rank {k} out of range (1..={max})")]
    RankOutOfRange { k: usize, max: usize },

    #[error("sketch width {width} exceeds matrix dimensions {rows}x{cols}")]
    SketchTooWide {
        width: usize,
        rows: usize,
        cols: usize,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite gradient in `{param}` at step {step}")]
    NonFiniteGradient { param: String, step: usize },

    #[error("training diverged at step {step}")]
    Diverged { step: usize },

    #[error("bad file format: {0}")]
    Format(String),

    #[error("truncated input: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },

    #[error("unsupported format version {0}")]
    UnsupportedVersion(u32),

    #[error("non-finite value in report field `{0}`")]
    NonFiniteField(String),

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
