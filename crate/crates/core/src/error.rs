//! Error type shared across the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("dataset error: {0}")]
    Data(String),

    #[error("action {0} is absent from the sample")]
    AbsentAction(usize),

    #[error("separation detected in logistic fit: |coefficient| exceeded {limit}; consider regularizing or trimming the design")]
    Separation { limit: f64 },

    #[error("singular system in {context}")]
    Singular { context: &'static str },

    #[error("rank deficiency: column(s) {columns:?} linearly dependent (tolerance {tol:e})")]
    RankDeficient { columns: Vec<usize>, tol: f64 },

    #[error("constraint system needs D <= n-1 (got D={d}, n={n}): with D=n the only feasible weights are the nominal inverse propensities")]
    TooManyConstraints { d: usize, n: usize },

    #[error("solver failed to converge: {0}")]
    NoConvergence(String),

    #[error("ground-truth fields required but absent (dataset was not simulated)")]
    TruthMissing,

    #[error("parse error: {0}")]
    Parse(String),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}
