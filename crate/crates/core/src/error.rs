//! Error type shared across the crate.
//!
//! Variants are grouped so the CLI can map them onto exit codes without
//! inspecting message strings: usage/config problems, data problems, and
//! numeric failures each form a distinct class.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, CoreError>;

#[derive(Error, Debug)]
pub enum CoreError {
    /// Bad argument to an operation or an out-of-range config value.
    #[error("invalid argument: {0}")]
    InvalidArg(String),

    /// Config file rejected (unknown key, missing section, protocol range).
    #[error("config error: {0}")]
    Config(String),

    /// Tensor shapes incompatible for the named op.
    #[error("shape mismatch in {op}: lhs {lhs:?}, rhs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    /// An op produced a NaN or infinity.
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    /// Training loss left the finite range; `step` is the first bad step.
    #[error("training diverged at step {step} (last finite loss {last_loss})")]
    Diverged { step: usize, last_loss: f64 },

    /// Malformed or inconsistent input data (row/field context in message).
    #[error("data error: {0}")]
    Data(String),

    /// Sweep output directory is missing cells needed for a report.
    #[error("incomplete sweep grid, missing cells: {0:?}")]
    IncompleteGrid(Vec<String>),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

/// Exit-code class for the CLI. `Usage` = 1, `Data` = 2, `Numeric` = 3.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Usage,
    Data,
    Numeric,
}

impl CoreError {
    pub fn class(&self) -> ErrorClass {
        match self {
            CoreError::InvalidArg(_) | CoreError::Config(_) => ErrorClass::Usage,
            CoreError::Data(_)
            | CoreError::IncompleteGrid(_)
            | CoreError::Io(_)
            | CoreError::Json(_) => ErrorClass::Data,
            CoreError::ShapeMismatch { .. }
            | CoreError::NonFinite { .. }
            | CoreError::Diverged { .. } => ErrorClass::Numeric,
        }
    }
}
