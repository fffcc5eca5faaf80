//! Reverse-mode differentiation over a small set of coarse tensor operations.

mod graph;
mod store;
mod tensor;

pub mod gradcheck;
pub mod layers;

pub use graph::{
    conv1d_values, margin_logit, softmax_cross_entropy, BnUpdate, Gradients, Graph, Mode, Var, BN_EPS,
    BN_MOMENTUM, VAR_FLOOR,
};
pub use store::{Param, ParameterStore};
pub use tensor::Tensor;
