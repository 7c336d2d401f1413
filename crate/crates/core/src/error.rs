use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error at row {row}: {message}")]
    Parse { row: usize, message: String },

    #[error("validation error: {0}")]
    Validation(String),

    /// A caller violated an operation's precondition.
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },

    #[error("no solution: {0}")]
    NoSolution(String),

    #[error("singular system: {0}")]
    Singular(String),

    #[error("did not converge after {iterations} iterations (residual {residual:.3e})")]
    NonConvergence { iterations: usize, residual: f64 },

    #[error("model is not identifiable: {0}")]
    Identifiability(String),

    #[error("sampler failed for unit {unit}: {message}")]
    Sampler { unit: String, message: String },

    #[error("fractional weights degenerate for unit {unit}: {message}")]
    DegenerateWeights { unit: String, message: String },

    #[error("bandwidth too small: all kernel weights vanish for unit {unit}")]
    BandwidthTooSmall { unit: String },

    #[error("calibration infeasible: {0}")]
    Infeasible(String),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Stable machine-readable code for the error class.
    pub fn code(&self) -> &'static str {
        match self {
            Error::Io { .. } => "E_IO",
            Error::Parse { .. } => "E_PARSE",
            Error::Validation(_) => "E_VALIDATION",
            Error::Contract(_) => "E_CONTRACT",
            Error::Dimension { .. } => "E_DIMENSION",
            Error::NoSolution(_) => "E_NO_SOLUTION",
            Error::Singular(_) => "E_SINGULAR",
            Error::NonConvergence { .. } => "E_NONCONVERGENCE",
            Error::Identifiability(_) => "E_IDENTIFIABILITY",
            Error::Sampler { .. } => "E_SAMPLER",
            Error::DegenerateWeights { .. } => "E_WEIGHTS",
            Error::BandwidthTooSmall { .. } => "E_BANDWIDTH",
            Error::Infeasible(_) => "E_INFEASIBLE",
            Error::Csv(_) => "E_CSV",
            Error::Json(_) => "E_JSON",
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
