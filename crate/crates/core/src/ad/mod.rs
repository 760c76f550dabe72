//! Dense reverse-mode automatic differentiation over rank-2 `f64` tensors,
//! with a forward time-tangent channel recorded as ordinary graph nodes.

mod check;
mod graph;
mod params;
mod tensor;

pub use check::{finite_difference_check, FdReport};
pub use graph::{log_ndtr, Gradients, Graph, Primitive, Reduce, Stack, Var};
pub use params::{ParamEntry, ParamStore};
pub use tensor::Tensor;


#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum AdError {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: [usize; 2],
        rhs: [usize; 2],
    },
    #[error("{0} of a non-positive value")]
    NonPositive(&'static str),
    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),
    #[error("NaN or infinity encountered while accumulating gradients")]
    NonFiniteGradient,
    #[error("backward needs a scalar root, got shape {0:?}")]
    NonScalarRoot([usize; 2]),
    #[error("time tangent already set on this node")]
    TangentAlreadySet,
    #[error("unknown primitive `{0}`")]
    UnknownPrimitive(String),
    #[error("softmax row {0} has every entry masked")]
    AllMasked(usize),
    #[error("parameter `{0}` not found")]
    MissingParam(String),
    #[error("duplicate parameter `{0}`")]
    DuplicateParam(String),
    #[error("{0}")]
    InvalidArgument(String),
}
