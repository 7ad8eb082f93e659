use alloc::string::String;

/// Errors raised by the numerical core.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("matrix is not positive definite even with jitter {jitter:e}")]
    IllConditioned { jitter: f64 },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("column `{0}` has zero variance on the training split")]
    ZeroVariance(&'static str),

    #[error("CFL condition violated: courant number {courant} exceeds 1")]
    CflViolation { courant: f64 },

    #[error("non-finite gradient at iteration {iteration} (coordinate {index})")]
    NonFiniteGradient { iteration: usize, index: usize },

    #[error("non-finite objective at iteration {iteration}")]
    NonFiniteObjective { iteration: usize },

    #[error("metric undefined: {0}")]
    UndefinedMetric(&'static str),

    #[error("empty input: {0}")]
    Empty(&'static str),
}

pub type Result<T, E = Error> = core::result::Result<T, E>;
