use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    DimensionMismatch { context: String, expected: usize, got: usize },

    #[error("empty mini-batch")]
    EmptyBatch,

    #[error("sample index {index} out of range for dataset of size {n}")]
    IndexOutOfRange { index: usize, n: usize },

    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: String, reason: String },

    #[error("privacy budget exceeded: spend ({epsilon}, {delta}) over limit ({limit_epsilon}, {limit_delta})")]
    BudgetExceeded { epsilon: f64, delta: f64, limit_epsilon: f64, limit_delta: f64 },

    #[error("sample-size condition n >= L*R0^(2/ln d)/(mu*eps') violated: need n >= {required:.3}, have n = {n}")]
    SampleSize { required: f64, n: usize },

    #[error("alpha = {alpha} violates the precondition via `{constraint}` (bound {bound})")]
    AlphaPrecondition { constraint: String, alpha: f64, bound: f64 },

    #[error("point is not in the feasible set")]
    NotInSet,

    #[error("non-finite value encountered in {0}")]
    NonFinite(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn param(name: &str, reason: impl Into<String>) -> Self {
        Error::InvalidParameter { name: name.to_string(), reason: reason.into() }
    }
}
