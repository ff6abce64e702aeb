use thiserror::Error;

/// Errors raised by the numerical core.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("matrix is not positive definite (jitter ladder exhausted at {last_jitter:e})")]
    NotPositiveDefinite { last_jitter: f64 },
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("matrix is singular: {0}")]
    Singular(String),
    #[error("step size must be positive, got {0}")]
    NonPositiveStep(f64),
    #[error("window of {batch} observations at stride {stride} needs at least {needed} rows, series has {len}")]
    WindowTooLong {
        batch: usize,
        stride: usize,
        needed: usize,
        len: usize,
    },
    #[error("no cached latents for component {0}")]
    MissingCache(usize),
    #[error("unsupported tape operation: {0}")]
    UnsupportedOp(String),
    #[error("backward pass needs a 1x1 root, got {0}x{1}")]
    NonScalarRoot(usize, usize),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("non-finite loss in component {component} at iteration {iter}")]
    NonFiniteLoss { component: usize, iter: usize },
    #[error("malformed header: {0}")]
    MalformedHeader(String),
    #[error("non-uniform time spacing at row {row}")]
    NonUniformSpacing { row: usize },
    #[error("non-finite value at row {row}, column {column}")]
    NonFiniteValue { row: usize, column: String },
    #[error("io error: {0}")]
    Io(String),
    #[error("serialization error: {0}")]
    Serde(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Serde(e.to_string())
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Io(e.to_string())
    }
}
