use thiserror::Error;

/// Errors raised anywhere in the distillation pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("model spec mismatch: {}", .0.join(", "))]
    SpecMismatch(Vec<String>),

    #[error("layer index {layer} out of range for {n_layers} layers")]
    LayerOutOfRange { layer: usize, n_layers: usize },

    #[error("token id {id} out of range for vocabulary of {vocab}")]
    TokenOutOfRange { id: usize, vocab: usize },

    #[error("checkpoint format: {0}")]
    Checkpoint(String),

    #[error("infeasible task: {0}")]
    InfeasibleTask(String),

    #[error("scoring incomplete, layer {layer} failed: {reason}")]
    ScoringIncomplete { layer: usize, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}
