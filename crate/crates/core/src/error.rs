use thiserror::Error;

/// Errors raised by the library.
#[derive(Debug, Error)]
pub enum MclError {
    #[error("empty batch")]
    EmptyBatch,

    #[error("view index {index} out of range for batch of {len} views")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("labeled auxiliary mode requires at least one auxiliary transform")]
    NoAuxTransforms,

    #[error("batch carries no auxiliary labels")]
    MissingAuxLabels,

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("row {0} of the embedding matrix has zero norm")]
    ZeroNormRow(usize),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("cell (main {main}, aux {aux}) has {count} samples; at least 2 are required")]
    InsufficientSamples { main: usize, aux: usize, count: usize },

    #[error("covariance of cell (main {main}, aux {aux}) is not positive definite after ridge {ridge}")]
    NotPositiveDefinite { main: usize, aux: usize, ridge: f64 },

    #[error("unknown auxiliary label {0}")]
    UnknownAuxLabel(usize),

    #[error("metrics need at least one in-distribution and one out-of-distribution sample")]
    SingleClass,

    #[error("{0}")]
    InvalidInput(String),

    #[error("numerical abort at epoch {epoch}, step {step}: {reason}")]
    NumericalAbort {
        epoch: usize,
        step: usize,
        reason: String,
        /// JSON snapshot of the offending batch and configuration.
        snapshot: String,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error("config parse error: {0}")]
    Toml(#[from] toml::de::Error),
}

pub type Result<T> = std::result::Result<T, MclError>;
