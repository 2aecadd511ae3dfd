//! Error type shared by all kernels in this crate.

use std::fmt;

pub type Result<T> = std::result::Result<T, CoreError>;

/// Errors emitted by tensor kernels, normalization layers and metrics.
#[derive(Debug, Clone, PartialEq)]
pub enum CoreError {
    /// Operand shapes cannot be combined.
    Shape { op: &'static str, detail: String },
    /// A configuration value violates a structural requirement
    /// (e.g. a group count that does not divide the channel count).
    Config { detail: String },
    /// Caller-provided data is invalid (labels out of range, missing ids, ...).
    Input { detail: String },
    /// A computation produced non-finite values or failed to converge.
    Numerical {
        stage: &'static str,
        detail: String,
        residual: Option<f64>,
    },
}

impl CoreError {
    pub fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        CoreError::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub fn config(detail: impl Into<String>) -> Self {
        CoreError::Config {
            detail: detail.into(),
        }
    }

    pub fn input(detail: impl Into<String>) -> Self {
        CoreError::Input {
            detail: detail.into(),
        }
    }

    pub fn numerical(stage: &'static str, detail: impl Into<String>, residual: Option<f64>) -> Self {
        CoreError::Numerical {
            stage,
            detail: detail.into(),
            residual,
        }
    }

    pub fn is_numerical(&self) -> bool {
        matches!(self, CoreError::Numerical { .. })
    }
}

impl fmt::Display for CoreError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CoreError::Shape { op, detail } => write!(f, "shape error in {op}: {detail}"),
            CoreError::Config { detail } => write!(f, "configuration error: {detail}"),
            CoreError::Input { detail } => write!(f, "input error: {detail}"),
            CoreError::Numerical {
                stage,
                detail,
                residual,
            } => match residual {
                Some(r) => write!(f, "numerical error in {stage}: {detail} (residual {r:.3e})"),
                None => write!(f, "numerical error in {stage}: {detail}"),
            },
        }
    }
}

impl std::error::Error for CoreError {}
