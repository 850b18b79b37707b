use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("unknown tableau `{name}`; valid names: {valid}")]
    UnknownTableau { name: String, valid: String },

    #[error("invalid tableau: {0}")]
    InvalidTableau(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid noise specification: {0}")]
    InvalidNoise(String),

    #[error("point {coord} lies outside the noise domain [0, {length}] along axis {axis}")]
    PointOutsideDomain { axis: usize, coord: f64, length: f64 },

    #[error("noise index out of range: step {step} (of {steps}), point {point} (of {points})")]
    NoiseIndex {
        step: usize,
        steps: usize,
        point: usize,
        points: usize,
    },

    #[error("invalid grid: {0}")]
    InvalidGrid(String),

    #[error("stage solver did not converge after {iterations} iterations (residual {residual:e})")]
    NoConvergence { iterations: usize, residual: f64 },

    #[error("stage system is singular: {0}")]
    Singular(String),

    #[error("stage system is inconsistent: residual {residual:e} after solve")]
    Inconsistent { residual: f64 },

    #[error("non-finite value encountered in {0}")]
    NonFinite(String),

    #[error("system violates structural requirements: {0}")]
    InvalidSystem(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
