use thiserror::Error;

pub type Result<T> = std::result::Result<T, GscError>;

#[derive(Debug, Error)]
pub enum GscError {
    #[error("{op}: shape mismatch, expected {expected:?}, got {got:?}")]
    ShapeMismatch {
        op: &'static str,
        expected: Vec<usize>,
        got: Vec<usize>,
    },

    /// A precondition of an operation was violated by the caller.
    #[error("contract violation in {op}: {msg}")]
    Contract { op: &'static str, msg: String },

    #[error("{op} produced a non-finite value")]
    NonFinite { op: &'static str },

    #[error("training diverged at step {step}, epoch {epoch}: loss = {loss}")]
    Diverged { step: usize, epoch: usize, loss: f64 },

    #[error("no prototypes available; relabeling must fall back")]
    EmptyPrototypes,

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("malformed file: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl GscError {
    pub(crate) fn contract(op: &'static str, msg: impl Into<String>) -> Self {
        GscError::Contract { op, msg: msg.into() }
    }
}
