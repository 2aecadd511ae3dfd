//! Harness error type: core errors enriched with training context.

use ams_core::CoreError;
use std::fmt;

pub type Result<T> = std::result::Result<T, HarnessError>;

#[derive(Debug)]
pub enum HarnessError {
    Core(CoreError),
    /// A loss or gradient became non-finite, or a whitening failed to
    /// converge, at a known point in training.
    TrainAbort {
        stage: String,
        epoch: usize,
        step: usize,
        detail: String,
    },
    Config(String),
    Input(String),
    Io(std::io::Error),
    Json(serde_json::Error),
}

impl HarnessError {
    pub fn config(detail: impl Into<String>) -> Self {
        HarnessError::Config(detail.into())
    }

    pub fn input(detail: impl Into<String>) -> Self {
        HarnessError::Input(detail.into())
    }

    /// True for errors that should exit with the numerical-abort code.
    pub fn is_numerical(&self) -> bool {
        matches!(self, HarnessError::TrainAbort { .. })
            || matches!(self, HarnessError::Core(e) if e.is_numerical())
    }
}

impl fmt::Display for HarnessError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            HarnessError::Core(e) => write!(f, "{e}"),
            HarnessError::TrainAbort {
                stage,
                epoch,
                step,
                detail,
            } => write!(
                f,
                "numerical abort in {stage} at epoch {epoch}, step {step}: {detail}"
            ),
            HarnessError::Config(d) => write!(f, "configuration error: {d}"),
            HarnessError::Input(d) => write!(f, "input error: {d}"),
            HarnessError::Io(e) => write!(f, "io error: {e}"),
            HarnessError::Json(e) => write!(f, "json error: {e}"),
        }
    }
}

impl std::error::Error for HarnessError {}

impl From<CoreError> for HarnessError {
    fn from(e: CoreError) -> Self {
        HarnessError::Core(e)
    }
}

impl From<std::io::Error> for HarnessError {
    fn from(e: std::io::Error) -> Self {
        HarnessError::Io(e)
    }
}

impl From<serde_json::Error> for HarnessError {
    fn from(e: serde_json::Error) -> Self {
        HarnessError::Json(e)
    }
}
