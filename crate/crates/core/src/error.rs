use thiserror::Error;

use crate::covariance::CovarianceParams;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// A value outside the domain of an outcome transform or link.
    #[error("domain error at index {index}: {message}")]
    Domain { index: usize, message: String },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    /// Covariance matrix could not be factorized.
    #[error("numerical rank error: {0}")]
    NumericalRank(String),

    /// The optimizer ran out of iterations; `best` is the best point seen.
    #[error("covariance optimizer did not converge after {iterations} iterations (best nll {nll})")]
    NotConverged {
        best: CovarianceParams,
        nll: f64,
        iterations: usize,
    },

    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    #[error("covariate `{0}` has zero variance")]
    DegenerateCovariate(String),

    #[error("response has zero covariance with every covariate")]
    DegenerateResponse,

    #[error("all covariates were excluded by screening")]
    EmptyFeatures,

    #[error("quantile grid must have exactly {expected} levels, got {got}")]
    GridShape { expected: usize, got: usize },

    #[error("fold {fold}: {source}")]
    Fold {
        fold: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// Short machine-readable tag, used in CLI error reports.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Domain { .. } => "domain",
            Error::InvalidInput(_) => "invalid_input",
            Error::Config(_) => "config",
            Error::DimensionMismatch { .. } => "dimension_mismatch",
            Error::NumericalRank(_) => "numerical_rank",
            Error::NotConverged { .. } => "not_converged",
            Error::DegenerateInput(_) => "degenerate_input",
            Error::DegenerateCovariate(_) => "degenerate_covariate",
            Error::DegenerateResponse => "degenerate_response",
            Error::EmptyFeatures => "empty_features",
            Error::GridShape { .. } => "grid_shape",
            Error::Fold { .. } => "fold",
            Error::Parse(_) => "parse",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
            Error::Csv(_) => "csv",
        }
    }
}
