//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),

    /// Malformed input data (missing column, non-numeric cell, ...).
    #[error("invalid data: {0}")]
    InvalidData(String),

    /// A caller-supplied parameter is out of its domain.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// A stratum arm cannot support the adjusted regression.
    #[error("arm not estimable ({reason}) in stratum `{stratum}`, arm {arm}")]
    NotEstimable {
        stratum: String,
        arm: u8,
        reason: String,
    },

    /// The combination denominator vanished and no ridge was supplied.
    #[error("degenerate combination; supply lambda_ridge")]
    DegenerateCombination,

    /// A covariance matrix handed to the multi-estimator test is not
    /// positive definite.
    #[error("multi-combination requires positive definite covariance")]
    NotPositiveDefinite,

    /// Numerical failure that is not attributable to the input data.
    #[error("numerical failure: {0}")]
    Numerical(String),
}
