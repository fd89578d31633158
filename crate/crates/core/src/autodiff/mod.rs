//! Tape-based reverse-mode automatic differentiation over dense tensors.

mod fd;
mod graph;
mod primitive;
mod tensor;

pub use fd::{finite_difference_grad, max_relative_error};
pub use graph::{Gradients, Graph, Var};
pub use primitive::{Attrs, PrimitiveKind};
pub use tensor::{Element, Tensor};
