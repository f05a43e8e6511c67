//! Tensors, reverse-mode differentiation, layer primitives and optimizers.

pub mod gradcheck;
mod graph;
mod ops;
mod optim;
pub mod pten;
mod tensor;

pub use graph::{Backward, BackwardCtx, Graph, Var};
pub(crate) use ops::softmax_sites;
pub use ops::{activation, adaptive_avg_pool2d, conv2d, linear_per_location, softmax_channel, Activation};
pub use optim::{adam_update, poly_decay_lr, sgd_update, OptimizerKind, OptimizerState};
pub use tensor::{Real, Tensor};
