use thiserror::Error;

/// Every fallible operation in the crate reports one of these.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    #[error("exp overflow: argument bound {bound:.3} exceeds 700")]
    Overflow { bound: f64 },

    #[error("degenerate low-rank normalizer at degree {degree}: row {row} has sum {sum:e}")]
    Degenerate { degree: usize, row: usize, sum: f64 },

    #[error("singular density: {0}")]
    Singular(String),

    #[error("value out of range: {0}")]
    OutOfRange(String),

    #[error("non-finite value produced by {0}")]
    NonFinite(String),

    #[error("construction failed: {0}")]
    Construction(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn dim(op: &'static str, detail: impl Into<String>) -> Error {
    Error::Dimension { op, detail: detail.into() }
}
