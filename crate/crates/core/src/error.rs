use thiserror::Error;

/// Errors produced by the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("matrix is not positive definite (last jitter tried: {jitter:e})")]
    NotPositiveDefinite { jitter: f64 },

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("lengthscale must be strictly positive and finite, got {0}")]
    NonPositiveLengthscale(f64),

    #[error("quadrature grid too coarse: refinement changed the result by {change:e}")]
    GridTooCoarse { change: f64 },

    #[error("kernel has a non-stationary node but no latent field values were supplied")]
    MissingLatentContext,

    #[error("gradient has a non-finite entry at coordinate {0}")]
    NonFiniteGradient(usize),

    #[error("objective became non-finite at iteration {0}")]
    DivergedObjective(usize),

    #[error("target must be strictly positive for the log transform, got {value} at row {row}")]
    NonPositiveTarget { row: usize, value: f64 },

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("dataset is empty")]
    EmptyDataset,

    #[error("degenerate split: {0}")]
    DegenerateSplit(String),

    #[error("k = {k} exceeds the number of distinct cells ({cells})")]
    KTooLarge { k: usize, cells: usize },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// True for failures of the numerics (as opposed to bad input or configuration).
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::NotPositiveDefinite { .. }
                | Error::NonFiniteGradient(_)
                | Error::DivergedObjective(_)
                | Error::GridTooCoarse { .. }
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn mismatch(msg: impl Into<String>) -> Error {
    Error::DimensionMismatch(msg.into())
}
