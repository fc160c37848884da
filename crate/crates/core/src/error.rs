//! Crate-wide error type.

use thiserror::Error;

/// Errors raised across the pipeline.
///
/// Variants name the failure, not the module; most carry enough context to
/// tell the caller which knob to turn.
#[derive(Debug, Error)]
pub enum Error {
    #[error("iteration did not converge: {0}")]
    NonConvergence(String),
    #[error("point at distance {distance:.3e} from the boundary is outside the tube of width {width:.3e}")]
    OutsideTube { distance: f64, width: f64 },
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("quadrature did not converge: {0}")]
    QuadratureFailure(String),
    #[error("linear solve failed after {iterations} iterations (relative residual {residual:.3e})")]
    LinearSolveFailure { iterations: usize, residual: f64 },
    #[error("explicit step violates the stability bound: {0}")]
    CflViolation(String),
    #[error("Newton inversion diverged at t = {t}, y = ({y0}, {y1}), residual {residual:.3e}")]
    NewtonDivergence { t: f64, y0: f64, y1: f64, residual: f64 },
    #[error("preimage of ({y0}, {y1}) at t = {t} falls outside the region of definition")]
    OutOfRegion { t: f64, y0: f64, y1: f64 },
    #[error("no horizon in the dyadic ladder passed the transform checks: {0}")]
    NoAdmissibleT(String),
    #[error("no feasible θ₁ found above the scan floor for θ₀ = {theta0}")]
    NoFeasibleTheta1 { theta0: f64 },
    #[error("no hitting time in (−{rho1:.3e}, {rho1:.3e}): {detail}")]
    NoRootInInterval { rho1: f64, detail: String },
    #[error("patch cover failed: {0}")]
    CoverFailure(String),
    #[error("property {property} violated at {detail}")]
    PropertyViolation { property: String, detail: String },
    #[error("Gronwall hypothesis violated on path {path} at step {step}: {detail}")]
    HypothesisViolated { path: usize, step: usize, detail: String },
    #[error("reflection step of length {length:.3e} exceeds the projection radius {radius:.3e}")]
    StepTooLarge { length: f64, radius: f64 },
    #[error("constant `{0}` is missing from the ledger")]
    MissingConstant(String),
    #[error("config error at `{key}`: {message}")]
    Config { key: String, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn config(key: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config { key: key.into(), message: message.into() }
    }
}
