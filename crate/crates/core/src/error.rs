use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("domain violation: {0}")]
    Domain(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("kernel {0} is not differentiable")]
    NotDifferentiable(&'static str),

    #[error("input rows {first} and {second} coincide (distance {distance:e})")]
    DuplicatePoints {
        first: usize,
        second: usize,
        distance: f64,
    },

    #[error("degenerate pivot {pivot:e} at index {index}")]
    DegeneratePivot { index: usize, pivot: f64 },

    #[error("linear system is numerically singular (reciprocal condition estimate {rcond:e})")]
    SingularSystem { rcond: f64 },

    #[error("solver did not converge: {0}")]
    NotConverged(String),

    #[error("csv line {line}: {message}")]
    Csv { line: u64, message: String },

    #[error("model file format version {found} is not supported (expected {expected})")]
    FormatVersion { found: u64, expected: u64 },

    #[error("model file schema: {0}")]
    Schema(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
