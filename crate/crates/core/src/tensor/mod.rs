//! Dense tensors and reverse-mode automatic differentiation.

mod dense;
mod graph;
mod scalar;

pub use dense::Tensor;
pub use graph::{Graph, Var, NEG_SENTINEL};
pub use scalar::Scalar;

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("dimension error: {0}")]
    Shape(String),
    #[error("index error: {0}")]
    Index(String),
    #[error("softmax row {row} has every position forbidden")]
    DegenerateRow { row: usize },
    #[error("cannot normalize zero-norm row {row}")]
    ZeroNorm { row: usize },
    #[error("backward needs a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("graph already ran backward; call reset() before reuse")]
    GraphConsumed,
}
