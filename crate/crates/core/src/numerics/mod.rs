//! Dense tensor math, the reverse-mode tape, and the finite-difference
//! gradient checker.

mod gradcheck;
mod graph;
mod ops;
mod params;
mod tensor;

pub use gradcheck::{gradient_check, gradient_check_with, loss_fn, relative_error, GradCheckReport, ParamCheck, REL_ERR_FLOOR};
pub use graph::{Gradients, Graph, Var, LOG_CLAMP};
pub use ops::{affine, concat, masked_softmax, pointwise, sigmoid, Pointwise};
pub use params::{ParamId, ParameterStore};
pub use tensor::Tensor;
