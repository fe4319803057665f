use thiserror::Error;

/// Errors produced by the numerical core and its front ends.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: expected {expected}, got {got}")]
    DimensionMismatch {
        op: &'static str,
        expected: String,
        got: String,
    },
    #[error("matrix is not symmetric (max relative asymmetry {0:e})")]
    NotSymmetric(f64),
    #[error("matrix is not positive definite even with jitter {jitter:e}")]
    NotPositiveDefinite { jitter: f64 },
    #[error("tape does not match this network or head")]
    TapeMismatch,
    #[error("posterior is already finalized")]
    AlreadyFinalized,
    #[error("posterior is not finalized")]
    NotFinalized,
    #[error("non-finite loss {loss} at epoch {epoch}, step {step}")]
    NonFiniteLoss { epoch: usize, step: usize, loss: f64 },
    #[error("training schedule is empty (epochs = 0)")]
    EmptySchedule,
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("ensemble members disagree on the number of classes ({0} vs {1})")]
    HeterogeneousEnsemble(usize, usize),
    #[error("empty input")]
    EmptyInput,
    #[error("both in-distribution and out-of-distribution points are required")]
    OneClassOnly,
    #[error("parse error at row {row}, column {column}: {message}")]
    Parse {
        row: usize,
        column: usize,
        message: String,
    },
    #[error("missing column `{0}`")]
    MissingColumn(String),
    #[error("non-numeric feature `{value}` at row {row}, column `{column}`")]
    NonNumericFeature {
        row: usize,
        column: String,
        value: String,
    },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn shape_err(op: &'static str, expected: impl ToString, got: impl ToString) -> Error {
    Error::DimensionMismatch {
        op,
        expected: expected.to_string(),
        got: got.to_string(),
    }
}
