use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum HcdcError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape mismatch in {context}: expected {expected}, got {actual}")]
    ShapeMismatch {
        context: &'static str,
        expected: String,
        actual: String,
    },

    #[error("invalid dataset: {0}")]
    InvalidDataset(String),

    #[error("empty split: {0}")]
    EmptySplit(&'static str),

    #[error("singular system: condition number {condition:.3e} exceeds {limit:.1e}")]
    Singular { condition: f64, limit: f64 },

    #[error("power iteration did not converge after {iterations} iterations (last residual {residual:.3e})")]
    NoConvergence { iterations: usize, residual: f64 },

    #[error("divergence at step {step}: {what}")]
    Divergence { step: usize, what: String },

    #[error("Neumann series diverged (alpha * lambda_max estimate = {alpha_lambda:.4})")]
    NeumannDivergence { alpha_lambda: f64 },

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("rank deficient: {0}")]
    RankDeficient(String),

    #[error("indeterminate: {0}")]
    Indeterminate(String),

    #[error("missing manifest in {0}")]
    MissingManifest(PathBuf),

    #[error("ill-formed manifest {path}: {message}")]
    BadManifest { path: PathBuf, message: String },

    #[error("dimension mismatch in {file}: manifest declares {expected}, file has {actual}")]
    DimensionMismatch {
        file: String,
        expected: String,
        actual: String,
    },

    #[error("config error at `{path}`: {message}")]
    Config { path: String, message: String },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("csv error on {path}: {message}")]
    Csv { path: PathBuf, message: String },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl HcdcError {
    pub(crate) fn shape(context: &'static str, expected: impl ToString, actual: impl ToString) -> Self {
        HcdcError::ShapeMismatch {
            context,
            expected: expected.to_string(),
            actual: actual.to_string(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        HcdcError::Io {
            path: path.into(),
            source,
        }
    }

    /// True for failures that originate in numerical routines rather than
    /// configuration or I/O.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            HcdcError::Singular { .. }
                | HcdcError::NoConvergence { .. }
                | HcdcError::Divergence { .. }
                | HcdcError::NeumannDivergence { .. }
                | HcdcError::NonFinite(_)
                | HcdcError::RankDeficient(_)
                | HcdcError::Indeterminate(_)
                | HcdcError::EmptySplit(_)
                | HcdcError::ShapeMismatch { .. }
                | HcdcError::InvalidDataset(_)
                | HcdcError::InvalidArgument(_)
        )
    }

    pub fn is_io(&self) -> bool {
        matches!(
            self,
            HcdcError::Io { .. }
                | HcdcError::Csv { .. }
                | HcdcError::MissingManifest(_)
                | HcdcError::BadManifest { .. }
                | HcdcError::DimensionMismatch { .. }
        )
    }
}

pub type Result<T> = std::result::Result<T, HcdcError>;
