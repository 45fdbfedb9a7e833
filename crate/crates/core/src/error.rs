use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("parse error: {0}")]
    Parse(String),
    #[error("invalid case field `{field}`: {reason}")]
    Validation { field: String, reason: String },
    #[error("equilibrium solver did not converge after {iterations} iterations (residual {residual:e})")]
    NoEquilibrium { iterations: usize, residual: f64 },
    #[error("step size underflow at t = {time} s (h = {step:e})")]
    StepUnderflow { time: f64, step: f64 },
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("{0} unavailable")]
    Unavailable(String),
    #[error("window [{t0}, {t1}] lies outside trajectory span [{start}, {end}]")]
    Window { t0: f64, t1: f64, start: f64, end: f64 },
    #[error("missing measurement channel for bus {0}")]
    MissingChannel(usize),
    #[error("bus {0} is not a load bus")]
    NotLoadBus(usize),
    #[error("eta1 undefined for zero ground-truth gain")]
    ZeroTruth,
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite loss at iteration {0}")]
    Divergence(usize),
    #[error("covariance factorization failed at step {0}")]
    Cholesky(usize),
    #[error("unknown scenario `{0}`")]
    UnknownScenario(String),
    #[error("invalid argument: {0}")]
    Invalid(String),
}

impl Error {
    pub(crate) fn validation(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Validation {
            field: field.into(),
            reason: reason.into(),
        }
    }
}
