use thiserror::Error;

/// Library-wide error type.
#[derive(Debug, Error)]
pub enum AdvError {
    #[error("shape mismatch in {op}: {lhs} vs {rhs}")]
    ShapeMismatch { op: String, lhs: String, rhs: String },
    #[error("backward root must be scalar, got {0}")]
    NonScalarRoot(String),
    #[error("value is not an ancestor of the differentiated scalar")]
    NotAncestor,
    #[error("set_leaf on a non-leaf node")]
    NotALeaf,
    #[error("invalid permutation: {0}")]
    InvalidPermutation(String),
    #[error("op {0} is not supported inside a differentiable gradient sub-graph")]
    UnsupportedSecondOrder(String),
    #[error("dataset error: {0}")]
    Dataset(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("training diverged: {0}")]
    Diverged(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
