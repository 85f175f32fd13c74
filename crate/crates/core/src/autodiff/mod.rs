//! Dense tensors and a reverse-mode tape.
//!
//! Every op appends a node to a [`Graph`]; [`Graph::backward`] walks the
//! nodes in reverse insertion order, which is a valid reverse topological
//! order because a node can only reference earlier nodes.

mod graph;
mod gradcheck;
pub(crate) mod kernels;
mod tensor;

pub use graph::{AttentionSpec, Gradients, Graph, Var};
pub use gradcheck::{check_coordinates, gradcheck, relative_error};
pub use tensor::Tensor;
