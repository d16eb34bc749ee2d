use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid {family} response y = {y}")]
    Domain { family: &'static str, y: f64 },

    #[error("shape mismatch: expected {expected}, got {got}")]
    Shape { expected: usize, got: usize },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("inner solver for {what} did not converge after {iters} iterations (residual {residual:e})")]
    InnerNonConvergence {
        what: &'static str,
        iters: usize,
        residual: f64,
    },

    #[error("solver did not converge after {iters} iterations (fixed-point residual {residual:e})")]
    NonConvergence {
        iters: usize,
        residual: f64,
        iterate: Vec<f64>,
    },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("leave-one-out refit {index}: {source}")]
    LooRefit {
        index: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("smoothing level alpha = {alpha}: {source}")]
    PathStep {
        alpha: f64,
        #[source]
        source: Box<Error>,
    },

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("{failed} of {total} replicates failed (more than 5%)")]
    TooManyFailures { failed: usize, total: usize },

    #[error("configuration errors:\n{}", .0.join("\n"))]
    Config(Vec<String>),
}

impl Error {
    /// True for solver convergence failures, including those wrapped with
    /// an index or smoothing level.
    pub fn is_nonconvergence(&self) -> bool {
        match self {
            Error::NonConvergence { .. }
            | Error::InnerNonConvergence { .. }
            | Error::TooManyFailures { .. } => true,
            Error::LooRefit { source, .. } | Error::PathStep { source, .. } => {
                source.is_nonconvergence()
            }
            _ => false,
        }
    }
}
