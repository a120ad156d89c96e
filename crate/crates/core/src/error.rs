use thiserror::Error;

/// Errors produced by the physics kernels, projectors, training loop and IO.
#[derive(Debug, Error)]
pub enum CplError {
    #[error("non-finite value in {context} at index {index}")]
    NonFinite { context: &'static str, index: usize },

    #[error("invalid bounds at index {index}: lower {lower} > upper {upper}")]
    InvalidBounds { index: usize, lower: f64, upper: f64 },

    #[error("degenerate constraint: weight vector has zero norm")]
    DegenerateConstraint,

    #[error("entropy clamp stopped after {iterations} iterations with positive residual {residual:e}")]
    MaxItersExceeded { iterations: usize, residual: f64 },

    #[error("shape mismatch: expected {expected}, found {found}")]
    ShapeMismatch { expected: usize, found: usize },

    #[error("dataset contains no windows")]
    EmptyDataset,

    #[error("field is constant; no gradient maximum to locate")]
    DegenerateField,

    #[error("insufficient data: need at least {needed} samples, got {found}")]
    InsufficientData { needed: usize, found: usize },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("malformed file: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, CplError>;

/// Returns `NonFinite` naming the first offending entry.
pub(crate) fn ensure_finite(values: &[f64], context: &'static str) -> Result<()> {
    match values.iter().position(|v| !v.is_finite()) {
        Some(index) => Err(CplError::NonFinite { context, index }),
        None => Ok(()),
    }
}
