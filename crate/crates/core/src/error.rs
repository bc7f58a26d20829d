use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    /// An argument lies outside the domain of the operation.
    #[error("domain error: {0}")]
    Domain(String),

    /// Evaluation was requested outside the range covered by tabulated or sampled data.
    #[error("range error: {0}")]
    Range(String),

    /// A kernel parameter or configuration value is invalid.
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    /// The variance density is unbounded at the requested time (singular kernel).
    #[error("unbounded density: {0}")]
    UnboundedDensity(String),

    /// The operation needs a regular kernel but was handed a singular one.
    #[error("singular kernel: {0}")]
    SingularKernel(String),

    #[error("covariance matrix is not positive definite: {0}")]
    NotPositiveDefinite(String),

    #[error("grid mismatch: {0}")]
    GridMismatch(String),

    /// Reconstruction produced a non-negligible imaginary part.
    #[error("conjugate symmetry violated: imaginary residue {residue:e} exceeds {tolerance:e}")]
    ConjugateSymmetry { residue: f64, tolerance: f64 },

    #[error("CFL condition violated: dt = {dt:e} exceeds the limit; use dt <= {suggested_dt:e}")]
    Cfl { dt: f64, suggested_dt: f64 },

    #[error("quadrature did not converge: {0}")]
    Quadrature(String),
}
