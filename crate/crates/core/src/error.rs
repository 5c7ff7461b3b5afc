use thiserror::Error;

/// Errors raised across the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    Domain(String),

    #[error("solver did not converge after {iterations} iterations (residual {residual:e})")]
    NoConvergence { iterations: usize, residual: f64 },

    #[error("grid too coarse: refined solution moved by {change:e} (tolerance {tolerance:e})")]
    GridTooCoarse { change: f64, tolerance: f64 },

    #[error("panel has no within-firm variation in ln asset value")]
    NoWithinVariation,

    #[error("calibration left the beta range at {beta} (range [{lower}, {upper}])")]
    CalibrationDiverged { beta: f64, lower: f64, upper: f64 },

    #[error("degenerate sample: {0}")]
    DegenerateSample(String),

    #[error("insufficient return history: {available} observations, {required} required")]
    InsufficientHistory { available: usize, required: usize },

    #[error("firm {firm}: every value of `{field}` is missing")]
    AllMissing { firm: String, field: String },

    #[error("group {group}: {excluded} of {total} eligible firm-quarters failed, above the allowed fraction")]
    ExclusionThreshold {
        group: String,
        excluded: usize,
        total: usize,
    },

    #[error("config: {0}")]
    Config(String),

    #[error("{path}: {message}")]
    Input { path: String, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn domain(msg: impl Into<String>) -> Error {
    Error::Domain(msg.into())
}

/// Rejects non-finite values and values outside the given lower bound.
pub(crate) fn require_positive(name: &str, value: f64) -> Result<()> {
    if value.is_finite() && value > 0.0 {
        Ok(())
    } else {
        Err(domain(format!(
            "{name} must be finite and > 0, got {value}"
        )))
    }
}

pub(crate) fn require_non_negative(name: &str, value: f64) -> Result<()> {
    if value.is_finite() && value >= 0.0 {
        Ok(())
    } else {
        Err(domain(format!(
            "{name} must be finite and >= 0, got {value}"
        )))
    }
}

pub(crate) fn require_finite(name: &str, value: f64) -> Result<()> {
    if value.is_finite() {
        Ok(())
    } else {
        Err(domain(format!("{name} must be finite, got {value}")))
    }
}
