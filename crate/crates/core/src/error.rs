//! Crate-wide error type.

use thiserror::Error;

/// Which matrix a positive-definiteness failure refers to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MatrixRole {
    /// The sample covariance matrix S.
    Sample,
    /// The model-implied covariance Sigma(theta).
    Implied,
    /// A weight matrix (e.g. V in the GLS function).
    Weight,
    /// The population covariance used for data generation.
    Population,
}

impl std::fmt::Display for MatrixRole {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let name = match self {
            MatrixRole::Sample => "sample covariance",
            MatrixRole::Implied => "model-implied covariance",
            MatrixRole::Weight => "weight",
            MatrixRole::Population => "population covariance",
        };
        f.write_str(name)
    }
}

#[derive(Debug, Error)]
pub enum SemError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("{matrix} matrix is not positive definite")]
    NotPositiveDefinite { matrix: MatrixRole },

    #[error("model is over-parameterized: {free} free parameters exceed p(p+1)/2 = {pstar}")]
    OverParameterized { free: usize, pstar: usize },

    #[error("invalid model: {0}")]
    InvalidModel(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("baseline test statistic is zero; index undefined")]
    UndefinedBaseline,

    #[error("raw data matrix required but not present in the sample moments")]
    MissingRawData,

    #[error("information matrix is singular")]
    SingularInformation,

    #[error("invalid simulation plan: {0}")]
    InvalidPlan(String),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, SemError>;
