use thiserror::Error;

/// Errors produced anywhere in the library.
#[derive(Debug, Error)]
pub enum Error {
    /// A point support has no measure; callers must branch on the variant.
    #[error("point support has no measure")]
    PointHasNoMeasure,

    /// A support failed a construction invariant (inverted box, degenerate
    /// polygon, self-intersection, ...).
    #[error("invalid support: {0}")]
    InvalidSupport(String),

    /// Input and parameter dimensions disagree.
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    /// Latent-slot or task index outside the configured model.
    #[error("index out of range: {0}")]
    IndexOutOfRange(String),

    #[error("bag must contain at least one point")]
    EmptyBag,

    /// Cholesky factorization failed even after jitter was applied.
    #[error(
        "Cholesky factorization failed for a {size}x{size} matrix \
         (jitter {jitter:.3e}, diagonal range [{min_diag:.6e}, {max_diag:.6e}])"
    )]
    CholeskyFailed {
        size: usize,
        jitter: f64,
        min_diag: f64,
        max_diag: f64,
    },

    /// The training objective became non-finite; reports where and how.
    #[error(
        "non-finite ELBO at cycle {cycle}, step {step}: value {value}, \
         parameter norm {param_norm:.6e}"
    )]
    NonFiniteElbo {
        cycle: usize,
        step: usize,
        value: f64,
        param_norm: f64,
    },

    /// Observation invalid for the task's likelihood.
    #[error("invalid observation: {0}")]
    InvalidObservation(String),

    /// Metric undefined (e.g. zero variance in the test targets).
    #[error("targets have zero variance; metric undefined")]
    ZeroVariance,

    #[error("{path}:{line}: {msg}")]
    Parse {
        path: String,
        line: usize,
        msg: String,
    },

    #[error("{path}: {msg}")]
    Format { path: String, msg: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
