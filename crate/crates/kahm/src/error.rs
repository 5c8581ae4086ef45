//! Error type shared by every module.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, KahmError>;

#[derive(Debug, Error)]
pub enum KahmError {
    #[error("parse error at line {line}, column {col}: {msg}")]
    Parse { line: usize, col: usize, msg: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("rows {first} and {second} are identical; deduplicate before fitting")]
    DuplicateRows { first: usize, second: usize },

    #[error("target matrix is identically zero")]
    ZeroTargets,

    #[error("factorization failed: {0}")]
    Factorization(String),

    #[error("evaluation point too far from data")]
    EvaluationUnderflow,

    #[error("class {0:?} has fewer than 2 distinct samples")]
    ClassTooSmall(String),

    #[error(
        "error budget not met after {cap} smoothing steps (best error {best:.6e} > budget {budget:.6e})"
    )]
    BudgetNotMet {
        cap: usize,
        best: f64,
        budget: f64,
        /// Whatever the smoother had produced when the cap was hit.
        trace: Box<crate::fabricate::SmootherTrace>,
    },

    #[error("subset {subset}: {source}")]
    Subset {
        subset: usize,
        #[source]
        source: Box<KahmError>,
    },

    #[error("serialization: {0}")]
    Serialize(String),
}

impl KahmError {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        KahmError::InvalidArgument(msg.into())
    }
}
