//! Dense tensors and reverse-mode differentiation.

mod check;
mod graph;
mod params;
mod tensor;

pub use check::{grad_check, relative_error, GradCheckReport, WorstCoordinate, EPS_RANGE};
pub use graph::{Gradients, Graph, Var};
pub use params::{ParamId, ParamStore};
pub use tensor::Tensor;

pub(crate) use graph::softmax_last;
