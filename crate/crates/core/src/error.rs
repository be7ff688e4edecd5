use thiserror::Error;

/// Errors surfaced by the inference engine and its I/O layer.
#[derive(Debug, Error)]
pub enum Error {
    #[error("non-finite emission {value} at (b={b}, t={t}, c={c})")]
    NonFiniteEmission { b: usize, t: usize, c: usize, value: f64 },

    #[error("non-finite parameter in {tensor} at flat index {index}")]
    NonFiniteParameter { tensor: &'static str, index: usize },

    #[error("invalid shape: {0}")]
    Shape(String),

    #[error("sequence {b} has length {length}, outside [1, {max}]")]
    InvalidLength { b: usize, length: usize, max: usize },

    #[error("malformed segmentation: {0}")]
    Segmentation(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("enumeration refused: {0}")]
    EnumerationGuard(String),

    #[error(
        "dense backend refused: edge tensor needs {required} bytes, guard is {guard} bytes; \
         use the streaming backend"
    )]
    DenseGuard { required: u128, guard: u128 },

    #[error("gradient check refused: T*K*C^2 = {work} exceeds guard {guard}")]
    GradcheckGuard { work: u128, guard: u128 },

    #[error("log-partition is not finite for sequence {b}: all messages hit the NEG_INF guard at position {position}")]
    NonFiniteLogZ { b: usize, position: usize },

    #[error("boundary posterior of sequence {0} has no positive mass")]
    ZeroBoundaryMass(usize),

    #[error("invalid proportions: {0}")]
    Proportions(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
