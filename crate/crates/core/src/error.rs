use std::path::PathBuf;

use fixsynth_tensor::TensorError;
use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Caller-supplied data or configuration violates a precondition.
    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("zero variance: {0}")]
    ZeroVariance(String),

    #[error("nearest correlation did not converge after {iterations} iterations (residual {residual:.3e})")]
    NotConverged {
        iterations: usize,
        residual: f64,
        last_iterate: Vec<f64>,
    },

    #[error("cholesky failed for {what}: schedule exhausted at jitter {jitter:.3e}")]
    Cholesky { what: String, jitter: f64 },

    #[error("training aborted at step {step}: non-finite loss")]
    NonFiniteLoss { step: usize },

    #[error("{what}: {failed} of {total} samples failed projection")]
    TooManyFailures { what: String, failed: usize, total: usize },

    #[error("missing input file {0}")]
    Missing(PathBuf),

    #[error(transparent)]
    Tensor(#[from] TensorError),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::Invalid(msg.into())
    }

    /// True for errors caused by bad inputs rather than a failed computation.
    pub fn is_validation(&self) -> bool {
        matches!(self, Error::Invalid(_) | Error::Missing(_))
    }
}
