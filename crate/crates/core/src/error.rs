use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    #[error("zero range between radar phase center and {what} at ({x:.6}, {y:.6})")]
    ZeroRange { what: &'static str, x: f64, y: f64 },

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("covariance lost positive definiteness at tau = {tau:.6} s ({stage})")]
    CovarianceNotPositiveDefinite { tau: f64, stage: &'static str },

    #[error("malformed {format} data: {reason}")]
    Format { format: &'static str, reason: String },

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn invalid(name: &'static str, reason: impl Into<String>) -> Self {
        Error::InvalidParameter {
            name,
            reason: reason.into(),
        }
    }

    /// True for failures of the numerical machinery (as opposed to bad input or I/O).
    pub fn is_numerical(&self) -> bool {
        matches!(self, Error::CovarianceNotPositiveDefinite { .. })
    }
}
