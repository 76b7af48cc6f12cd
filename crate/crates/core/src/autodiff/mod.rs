//! Reverse-mode differentiation, parameter storage, optimizers and the
//! finite-difference oracle.

mod graph;
pub mod gradcheck;
pub mod optim;
mod params;

pub use graph::{backward, Graph, Var};
pub(crate) use graph::{log_softmax_slice, softmax_slice};
pub use gradcheck::{check_gradients, compare_grads, finite_diff_grad, relative_error, GradCheckReport};
pub use optim::{clip_gradient_norm, clip_gradient_value, Optimizer, OptimizerConfig, OptimizerKind};
pub use params::{GradRecord, Group, ParamId, ParamStore};
