//! Dense tensors, a reverse-mode tape and the kernels behind both models.

mod gradcheck;
mod graph;
pub mod kernels;
mod tensor;

pub use gradcheck::{finite_diff_check, relative_error, REL_ERR_FLOOR};
pub use graph::{Gradients, Graph, Var};
pub use tensor::{Scalar, Tensor};

/// Default layer-norm epsilon.
pub const LN_EPS: f64 = 1e-5;
