//! Dense tensors, a reverse-mode autodiff tape, and the AdamW optimizer.

mod graph;
pub mod gradcheck;
mod optim;
mod real;
#[allow(clippy::module_inception)]
mod tensor;

pub use graph::{log_softmax_at, Activation, AttentionLayout, Graph, NodeId, Segment};
pub use gradcheck::{finite_diff_check, finite_diff_check_strided};
pub use optim::{AdamW, AdamWConfig};
pub use real::{gemm, Layout, Real};
pub use tensor::Tensor;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch between {left:?} and {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("expected rank {expected}, got shape {shape:?}")]
    RankMismatch { expected: usize, shape: Vec<usize> },
    #[error("invalid shape {0:?}")]
    InvalidShape(Vec<usize>),
    #[error("shape {shape:?} needs {} elements, got {len}", shape.iter().product::<usize>())]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("{0}: non-finite input")]
    NonFinite(&'static str),
    #[error("index {index} out of range 0..{bound}")]
    Index { index: usize, bound: usize },
    #[error("backward needs a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("attention layout: {0}")]
    Layout(String),
}
