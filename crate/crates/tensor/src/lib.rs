//! Dense row-major f64 tensors and a recording graph with reverse-mode
//! differentiation over the primitive set the segmentation model uses.

mod backward;
pub mod check;
pub mod error;
mod graph;
pub mod kernels;
pub mod shape;
mod tensor;

pub use check::{finite_diff_check, finite_diff_check_multi};
pub use error::{Result, TensorError};
pub use graph::{Graph, Var};
pub use tensor::{numel, DType, Tensor};
