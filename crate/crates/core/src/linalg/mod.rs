//! Dense matrices, reverse-mode differentiation and gradient checking.

mod grad_check;
mod graph;
mod matrix;
mod optim;

pub use grad_check::{grad_check, graph_loss, GradCheckReport, REL_FLOOR};
pub use graph::{Gradients, Graph, NodeId, Traversal};
pub(crate) use graph::{sigmoid, unfold};
pub use matrix::{linear, softmax_rows, Matrix};
pub use optim::Sgd;
