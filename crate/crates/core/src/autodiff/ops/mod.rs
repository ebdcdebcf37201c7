//! Differentiable primitives.

mod conv;
mod elementwise;
pub(crate) mod linalg;
mod nn;
mod reduce;
mod shape;

pub use conv::{conv3d, maxpool3d, PoolPadding};
pub use elementwise::{add, gelu, mul, scale, sub};
pub use linalg::{bmm, matmul};
pub use nn::{layer_norm, log_softmax, softmax};
pub use reduce::{mean, mean_axis, sum};
pub use shape::{concat, index_select, narrow, pad, permute, reshape, shift, PadMode};
