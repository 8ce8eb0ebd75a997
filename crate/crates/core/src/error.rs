use thiserror::Error;

/// Errors produced anywhere in the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid fixed-point config: ell={ell}, frac={frac}")]
    InvalidConfig { ell: u32, frac: u32 },

    #[error("value {value} does not fit the fixed-point range (|x| < {bound})")]
    Overflow { value: f64, bound: f64 },

    #[error("ring config mismatch: {left:?} vs {right:?}")]
    ConfigMismatch {
        left: crate::ring::FixedPointConfig,
        right: crate::ring::FixedPointConfig,
    },

    #[error("party {0:?} is detached from the channel")]
    Detached(crate::transport::Party),

    #[error("oblivious transfer: {0}")]
    Ot(String),

    #[error("comparison: {0}")]
    Compare(String),

    #[error("invalid probability vector: {0}")]
    InvalidDistribution(String),

    #[error("probability q of the drafted token is zero")]
    ZeroDraftProbability,

    #[error("residual distribution is identically zero (p == q)")]
    DegenerateResidual,

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("{path}:{line}: {message}")]
    Parse {
        path: String,
        line: usize,
        message: String,
    },

    #[error("empty corpus")]
    EmptyCorpus,

    #[error("training diverged at epoch {epoch}: loss = {loss}")]
    Diverged { epoch: usize, loss: f64 },

    #[error("invalid configuration field `{field}`: {message}")]
    Config { field: String, message: String },

    #[error("invariant violated: {0}")]
    Invariant(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
