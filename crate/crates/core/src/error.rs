use thiserror::Error;

/// Unified error type for the whole crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {context}: expected {expected}, got {got}")]
    ShapeMismatch {
        context: &'static str,
        expected: String,
        got: String,
    },

    #[error("invalid parameter: {0}")]
    InvalidParam(String),

    #[error("index out of range: {0}")]
    Index(String),

    #[error("batch norm in train mode needs a batch of at least 2, got {0}")]
    DegenerateBatch(usize),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("tensors belong to different tapes")]
    TapeMismatch,

    #[error(
        "infeasible budget: limit {limit} is below the cheapest row (s={cheapest_s}, cost={cheapest_cost})"
    )]
    InfeasibleBudget {
        limit: f64,
        cheapest_s: f64,
        cheapest_cost: f64,
    },

    #[error("non-finite loss: {0}")]
    NonFiniteLoss(String),

    #[error("invalid config at `{key}`: {message}")]
    Config { key: String, message: String },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("config hash mismatch: checkpoint has {found:#018x}, current config is {expected:#018x}")]
    ConfigHashMismatch { found: u64, expected: u64 },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Stable exit code per error class, used by the CLI.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config { .. } | Error::InvalidParam(_) => 2,
            Error::Io(_) | Error::Json(_) | Error::Checkpoint(_) | Error::ConfigHashMismatch { .. } => 3,
            Error::InfeasibleBudget { .. } => 4,
            Error::NonFiniteLoss(_) => 6,
            _ => 1,
        }
    }
}

pub(crate) fn shape_err(context: &'static str, expected: impl ToString, got: impl ToString) -> Error {
    Error::ShapeMismatch {
        context,
        expected: expected.to_string(),
        got: got.to_string(),
    }
}
