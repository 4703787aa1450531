//! Error type shared across the crate.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid specification: {0}")]
    InvalidSpec(String),

    #[error("matrix is not Hermitian (residual {residual:.3e} exceeds {tolerance:.3e})")]
    NotHermitian { residual: f64, tolerance: f64 },

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error(
        "ambiguous dressed-state labeling for {label}: best overlap {overlap:.3} is below 0.5"
    )]
    AmbiguousLabel { label: String, overlap: f64 },

    #[error("bare product label {0} was not assigned to any eigenstate")]
    UnassignedLabel(String),

    #[error("low-energy projection at cutoff {cutoff} GHz keeps no states")]
    EmptyProjection { cutoff: f64 },

    #[error("effective Josephson energy is not positive at this bias (cos(φ_ext/2) ≤ 0)")]
    DegenerateCouplerPotential,

    #[error("calibration failed: {0}")]
    Calibration(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("{0}")]
    Config(String),
}
