//! Error type shared by all toolchain modules.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor or layer shapes do not compose.
    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    Dimension {
        context: String,
        expected: String,
        got: String,
    },

    /// Missing or inconsistent configuration (absent weights, bad bit widths, ...).
    #[error("configuration error: {0}")]
    Config(String),

    /// A layer cannot be represented on the crossbar (all-zero weights, W_max = 0).
    #[error("degenerate layer {layer}: {reason}")]
    DegenerateLayer { layer: usize, reason: String },

    /// Model does not fit the configured crossbar geometry.
    #[error("mapping capacity exceeded: offending layers {layers:?}")]
    Capacity { layers: Vec<usize> },

    /// A sub-GEMM split cannot be produced for the requested tile.
    #[error("split error for layer {layer}: {reason}")]
    Split { layer: usize, reason: String },

    /// Numerical failure in a calibration or fit.
    #[error("calibration error: {0}")]
    Calibration(String),

    /// Training loop failure (divergence, NaN loss).
    #[error("training error: {0}")]
    Training(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    /// Malformed binary tensor file.
    #[error("tensor format error: {0}")]
    TensorFormat(String),

    /// A golden-table fixture row could not be matched against computed values.
    #[error("fixture error: {0}")]
    Fixture(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn dimension(context: impl Into<String>, expected: impl ToString, got: impl ToString) -> Self {
        Error::Dimension {
            context: context.into(),
            expected: expected.to_string(),
            got: got.to_string(),
        }
    }

    /// Process exit code contract: 2 config/input, 3 capacity/mapping, 4 numerical.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Capacity { .. } | Error::Split { .. } => 3,
            Error::Calibration(_) | Error::Training(_) => 4,
            _ => 2,
        }
    }
}
