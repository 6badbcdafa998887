use thiserror::Error;

use crate::problem::ValidationReport;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {matrix}: expected {expected}, got {actual}")]
    Dimension {
        matrix: String,
        expected: String,
        actual: String,
    },

    #[error("{what} is not positive definite (min eigenvalue {min_eigenvalue:e})")]
    Definiteness { what: String, min_eigenvalue: f64 },

    #[error("{solver} did not converge after {iterations} iterations (last residual {residual:e})")]
    NotConverged {
        solver: &'static str,
        iterations: usize,
        residual: f64,
    },

    #[error("coupled Riccati iteration did not converge after {iterations} iterations (last step {last_step:e})")]
    CoupledNotConverged {
        iterations: usize,
        last_step: f64,
        step_history: Vec<f64>,
    },

    #[error("coupled Riccati iteration {iteration}: {source}")]
    CoupledStage {
        iteration: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("{what} is not stable (spectral radius {radius})")]
    Unstable { what: String, radius: f64 },

    #[error("{what}: residual {residual:e} exceeds tolerance {tolerance:e}")]
    Certification {
        what: String,
        residual: f64,
        tolerance: f64,
    },

    #[error("problem instance failed validation: {0}")]
    Invalid(ValidationReport),

    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error("noise covariance cannot be factored: {0}")]
    NoiseModel(String),

    #[error("finite-horizon problem too large: n*M = {size} exceeds {limit}")]
    TooLarge { size: usize, limit: usize },

    #[error("{0}")]
    InvalidArgument(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn dim(matrix: impl Into<String>, expected: (usize, usize), actual: (usize, usize)) -> Self {
        Error::Dimension {
            matrix: matrix.into(),
            expected: format!("{}x{}", expected.0, expected.1),
            actual: format!("{}x{}", actual.0, actual.1),
        }
    }

    pub(crate) fn at_stage(self, stage: &'static str) -> Self {
        Error::Stage {
            stage,
            source: Box::new(self),
        }
    }

    /// Name of the pipeline stage that failed, if the error carries one.
    pub fn stage(&self) -> Option<&'static str> {
        match self {
            Error::Stage { stage, .. } => Some(stage),
            _ => None,
        }
    }

    /// Innermost error, skipping stage labels.
    pub fn root(&self) -> &Error {
        match self {
            Error::Stage { source, .. } | Error::CoupledStage { source, .. } => source.root(),
            other => other,
        }
    }
}
