//! Error type shared by every numerical routine in the crate.

use num_complex::Complex64;

/// Failures reported by the workbench.
#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum Error {
    /// A caller-supplied parameter violates a documented precondition.
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    /// Two gridded objects live on different domains.
    #[error("domain mismatch: {0}")]
    DomainMismatch(String),

    /// A computation produced NaN or infinite values.
    #[error("non-finite result in {0}")]
    NonFinite(String),

    /// The spectral parameter lies too close to a detected zero of the determinant.
    #[error("spectral parameter {k} lies within {radius} of the exceptional point {zero}")]
    NearExceptional {
        k: Complex64,
        zero: Complex64,
        radius: f64,
    },

    /// The determinant is below the zero threshold, so the CGO system is numerically singular.
    #[error("|D({k})| = {abs_det:e} is below the zero threshold {threshold:e}")]
    NearlySingular { k: Complex64, abs_det: f64, threshold: f64 },

    /// An iterative solver stopped before reaching its tolerance.
    #[error("no convergence after {iterations} iterations (relative residual {residual:e})")]
    NoConvergence { iterations: usize, residual: f64 },

    /// An eigenvalue sits too close to a resolvent contour.
    #[error("eigenvalue {eigenvalue} lies within {band} of the contour |z - {center}| = {radius}")]
    EigenvalueOnContour {
        eigenvalue: Complex64,
        center: Complex64,
        radius: f64,
        band: f64,
    },

    /// Two projections are too far apart for the similarity series to converge.
    #[error("projection gap {gap} is not below 1/2")]
    GapTooLarge { gap: f64 },

    /// A dense factorization or eigensolver failed.
    #[error("linear algebra failure: {0}")]
    LinearAlgebra(String),

    /// A quadrature or integration routine failed to produce a usable value.
    #[error("quadrature failure: {0}")]
    Quadrature(String),

    /// Reading or writing an artifact failed.
    #[error("i/o failure: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Io(e.to_string())
    }
}

/// Result alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;
