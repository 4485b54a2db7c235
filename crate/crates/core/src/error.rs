use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },

    #[error("infeasible solution: {0}")]
    Infeasible(String),

    #[error("infeasible action {action}: {reason}")]
    InfeasibleAction { action: usize, reason: String },

    #[error("no feasible node in a non-terminal state")]
    NoFeasibleNode,

    #[error("augmentation undefined for {0}")]
    AugmentationUndefined(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("missing parameter `{0}`")]
    MissingParameter(String),

    #[error("no reference point for {problem} n={n}; pass one explicitly")]
    MissingReference { problem: String, n: usize },

    #[error("size limit exceeded: {0}")]
    SizeLimit(String),

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub(crate) fn shape_err(op: &'static str, detail: impl Into<String>) -> Error {
    Error::Shape {
        op,
        detail: detail.into(),
    }
}
