use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum IcfError {
    #[error("shape mismatch: {context}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        context: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("dimension error: {0}")]
    Dimension(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("unknown preset `{0}` (known: mazebase-small, mazebase-switches, two-digit-grid)")]
    UnknownPreset(String),
    #[error("invalid action index {index} (action set has {n_actions} actions)")]
    InvalidAction { index: usize, n_actions: usize },
    #[error("state space too large: {0} states exceeds limit {1}")]
    StateSpaceTooLarge(usize, usize),
    #[error("numerical abort at step {step}: {detail}")]
    NumericalAbort { step: u64, detail: String },
    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),
    #[error("checkpoint version mismatch: found {found}, expected {expected}")]
    CheckpointVersion { found: u32, expected: u32 },
    #[error("degenerate input: {0}")]
    Degenerate(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, IcfError>;
