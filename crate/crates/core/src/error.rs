use thiserror::Error;

pub type Result<T, E = DroError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum DroError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("timestep {t} outside 1..={horizon}")]
    TimestepOutOfRange { t: usize, horizon: usize },

    #[error("unknown condition {0}")]
    UnknownCondition(usize),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("numeric overflow in {op}: {detail}")]
    Numeric { op: String, detail: String },

    #[error("condition {condition}: pool has {have} items, need {need}")]
    InsufficientPool { condition: usize, have: usize, need: usize },

    #[error("config error: {0}")]
    Config(String),

    #[error("malformed file: {0}")]
    Format(String),

    #[error("not found: {0}")]
    NotFound(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Coarse failure category, used by the command line for exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorCategory {
    Config,
    Numeric,
    Io,
}

impl DroError {
    pub fn numeric(op: impl Into<String>, detail: impl Into<String>) -> Self {
        DroError::Numeric { op: op.into(), detail: detail.into() }
    }

    pub fn category(&self) -> ErrorCategory {
        match self {
            DroError::Numeric { .. } => ErrorCategory::Numeric,
            DroError::Io(_) | DroError::NotFound(_) | DroError::Format(_) => ErrorCategory::Io,
            _ => ErrorCategory::Config,
        }
    }
}
