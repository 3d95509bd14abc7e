//! Reverse-mode automatic differentiation over dense `f64` tensors.

mod graph;
mod gradcheck;
mod optim;
mod tensor;

pub use graph::{dropout_mask, Gradients, Graph, Var};
pub(crate) use graph::gemm;

pub use gradcheck::{grad_check, grad_check_store, relative_error, GradCheckOptions, GradCheckReport, FD_STEP};
pub use optim::Adam;
pub use tensor::{ParamId, ParamStore, Tensor};
