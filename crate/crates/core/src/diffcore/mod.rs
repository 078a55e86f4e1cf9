//! Dense tensors, a small reverse-mode differentiation graph, and the LTF1
//! tensor file format.

mod graph;
pub mod gradcheck;
pub mod io;
pub mod spatial;
mod tensor;

pub use gradcheck::{grad_check, grad_check_per_param, grad_check_sampled};
pub use graph::{Elementwise, Gradients, Graph, Reduce, Unary, Var};
pub use spatial::{Padding, Rect};
pub use tensor::Tensor;
