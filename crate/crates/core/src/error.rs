use thiserror::Error;

/// Errors raised anywhere in model construction, fitting and evaluation.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("empty input: {0}")]
    Empty(String),

    #[error("degenerate geometry: {0}")]
    Degenerate(String),

    #[error("matrix {block} is not positive definite after jitter retry")]
    NotPositiveDefinite { block: String },

    #[error("rank-deficient design; dependent columns: {columns:?}")]
    RankDeficient { columns: Vec<usize> },

    #[error("non-finite log-likelihood at parameters {params}")]
    NonFinite { params: String },

    #[error("insufficient temporal coverage: {0}")]
    Coverage(String),

    #[error("missing-value completion did not converge after {iterations} iterations (last relative change {last_change:.3e})")]
    CompletionDiverged {
        iterations: usize,
        last_change: f64,
        trace: Vec<f64>,
    },

    #[error("optimizer failed: {reason} after {} iterations", trace.len())]
    Optimizer {
        reason: String,
        trace: Vec<crate::optimize::TraceEntry>,
    },

    #[error("unknown site `{0}`")]
    UnknownSite(String),

    #[error("period {0} is outside the temporal basis grid")]
    PeriodOutOfGrid(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error in {path}: {msg}")]
    Parse { path: String, msg: String },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Invalid(msg.into()))
}
