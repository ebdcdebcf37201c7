//! Minimal dense tensor with reverse-mode differentiation.
//!
//! Graph nodes are recorded only when at least one input requires grad, so
//! a computation over frozen parameters and plain data leaves no trace and
//! retains nothing for a backward pass.

pub mod backward;
pub mod census;
pub mod checkpoint;
pub mod context;
pub mod gradcheck;
pub mod ops;
pub mod primitive;
pub(crate) mod tensor;

use thiserror::Error;

pub use backward::{backward, BackwardStats, GradientMap};
pub use census::{census, GraphCensus};
pub use context::{branch_scope, no_grad, Branch, BranchCounts};
pub use gradcheck::{grad_check, grad_check_sampled, relative_error, GradCheckReport};
pub use primitive::{primitive_forward, Attr, Attrs, PrimitiveKind};
pub use tensor::{Tensor, TensorId};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("{op}: shape mismatch: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("unknown primitive kind `{0}`")]
    UnknownKind(String),
    #[error("backward needs a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("function value is not finite: {0}")]
    NonFinite(f64),
    #[error("invalid attribute: {0}")]
    Attr(String),
    #[error("{0} needs data but the tensor is shape-only")]
    Meta(&'static str),
}

pub type Result<T> = std::result::Result<T, TensorError>;
