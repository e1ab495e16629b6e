use thiserror::Error;

/// Errors raised by the numerical library.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("validate_arma_spec: {polynomial} polynomial is not minimum-phase (root modulus {modulus:.12})")]
    NonMinimumPhase {
        polynomial: &'static str,
        modulus: f64,
    },

    #[error("validate_arma_spec: invalid value for `{field}`: {reason}")]
    InvalidScalar { field: &'static str, reason: String },

    #[error("{op}: dimension mismatch ({detail})")]
    DimensionMismatch { op: &'static str, detail: String },

    #[error("kalman_step: innovation variance {variance} is not positive")]
    NumericalDegeneracy { variance: f64 },

    #[error("solve_riccati: fixed-point iteration diverged after {iterations} iterations (max entry {max_entry:e})")]
    Divergence { iterations: usize, max_entry: f64 },

    #[error("calibrate_e: no stationary operating point reaches power {power}")]
    Infeasible { power: f64 },

    #[error("szego_rate_check: adaptive quadrature did not reach tolerance (error estimate {estimate:e})")]
    QuadratureFailure { estimate: f64 },

    #[error("batch conditioning: observation covariance is numerically singular")]
    SingularConditioning,

    #[error("sweep: no axis values given")]
    EmptySweep,
}

pub type Result<T> = std::result::Result<T, Error>;
