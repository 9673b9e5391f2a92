//! Error types shared by the numeric kernels.

use thiserror::Error;

/// Errors from the dense kernels (matrix ops, norms, optimizer steps).
#[derive(Debug, Clone, PartialEq, Error)]
pub enum NumError {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("epsilon must be positive, got {0}")]
    BadEpsilon(f64),
    #[error("finite-difference step must be positive, got {0}")]
    BadStep(f64),
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("zero matrix input to {0}")]
    ZeroInput(&'static str),
    #[error("{0} requires a 2-D parameter")]
    NotTwoDim(&'static str),
}
