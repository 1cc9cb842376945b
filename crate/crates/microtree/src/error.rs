//! Crate-wide error type.

use thiserror::Error;

/// Convenience alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Malformed input that could not be parsed. `line` is 1-based and
    /// counts the header, matching what an editor shows.
    #[error("parse error at line {line}: {msg}")]
    Parse { line: u64, msg: String },

    /// Input parsed but violates a domain invariant.
    #[error("validation error{}: {msg}", fmt_row(*.row))]
    Validation { row: Option<u64>, msg: String },

    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error("insufficient data: need at least {needed}, got {got}")]
    InsufficientData { needed: usize, got: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("shape error: expected {expected} values, got {got}")]
    Shape { expected: usize, got: usize },

    /// Training data contains a single class; nothing to learn.
    #[error("degenerate training data: {0}")]
    DegenerateTraining(String),

    /// Metric undefined for the given inputs (e.g. AUC with one class).
    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error("degenerate probability {0}: factors require p strictly inside (0, 1)")]
    DegenerateProbability(f64),

    #[error("degenerate volatility: variance must be strictly positive (got {0})")]
    DegenerateVolatility(f64),

    /// The risk-free forward lies outside the (d, u) bracket.
    #[error("arbitrage violation{}: {msg}", fmt_state(*.state_id))]
    ArbitrageViolation { state_id: Option<usize>, msg: String },

    #[error("calibration failed for state {state_id}: {msg}")]
    CalibrationFailure { state_id: usize, msg: String },

    /// Even the pooled global fallback could not be calibrated.
    #[error("global calibration error: {0}")]
    GlobalCalibration(String),

    /// Option terms inconsistent with the tree they are priced on.
    #[error("spec mismatch: {0}")]
    SpecMismatch(String),

    #[error("resource limit: {what} would require {requested}, cap is {limit}")]
    ResourceLimit {
        what: String,
        requested: u64,
        limit: u64,
    },

    #[error("missing artifact: {0}")]
    MissingArtifact(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Process exit code for the CLI: 2 validation, 3 resource cap,
    /// 4 numerical failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::ResourceLimit { .. } => 3,
            Error::DegenerateProbability(_)
            | Error::DegenerateVolatility(_)
            | Error::ArbitrageViolation { .. }
            | Error::CalibrationFailure { .. }
            | Error::GlobalCalibration(_)
            | Error::DegenerateTraining(_)
            | Error::UndefinedMetric(_) => 4,
            _ => 2,
        }
    }
}

fn fmt_row(row: Option<u64>) -> String {
    match row {
        Some(r) => format!(" at row {r}"),
        None => String::new(),
    }
}

fn fmt_state(state_id: Option<usize>) -> String {
    match state_id {
        Some(s) => format!(" in state {s}"),
        None => String::new(),
    }
}
