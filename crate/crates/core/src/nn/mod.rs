//! Dense tensors, a taped reverse-mode graph, parameters, optimizers and a
//! finite-difference gradient checker. Everything runs in `f64`.

mod conv;
pub mod gradcheck;
mod graph;
mod optim;
mod params;
mod tensor;

pub use conv::conv1d_proto;
pub use gradcheck::{finite_difference_check, GradCheckReport};
pub use graph::{Graph, RowMixing, Var};
pub use optim::{Optimizer, OptimizerKind};
pub use params::{Gradients, ParamStore};
pub use tensor::{sigmoid, softmax_rows, softplus, Tensor};

/// Layer-norm epsilon used throughout the model.
pub const LAYER_NORM_EPS: f64 = 1e-5;
