use thiserror::Error;

/// Errors produced by the inference engines.
#[derive(Debug, Error)]
pub enum GpError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("unsupported kernel: {0}")]
    UnsupportedKernel(String),

    #[error("ill-conditioned computation at step {step}: {detail}")]
    IllConditioned { step: usize, detail: String },

    #[error(
        "backfitting did not converge after {sweeps} sweeps (last relative change {last_change:e})"
    )]
    NotConverged { sweeps: usize, last_change: f64 },

    #[error("Newton iteration did not converge after {iterations} iterations")]
    NewtonNotConverged {
        iterations: usize,
        objective_trace: Vec<f64>,
    },

    #[error("non-finite gradient for parameter {index}")]
    NonFiniteGradient { index: usize },

    #[error("degenerate projection: {0}")]
    DegenerateProjection(String),

    #[error("optimizer failed: {reason}")]
    OptimizerFailure { reason: String, best: Vec<f64> },

    #[error("shape mismatch in dimension {dim}: {detail}")]
    Shape { dim: usize, detail: String },

    #[error("model has not been fitted")]
    NotFitted,

    #[error("divergent chain: {0}")]
    Divergent(String),

    #[error("parse error at line {line}: {detail}")]
    Parse { line: usize, detail: String },

    #[error("unsupported format: {0}")]
    UnsupportedFormat(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, GpError>;

pub(crate) fn invalid(msg: impl Into<String>) -> GpError {
    GpError::InvalidArgument(msg.into())
}
