//! Dense-tensor reverse-mode automatic differentiation in double precision.
//!
//! Build a [`Graph`] per forward pass, bind parameters from a
//! [`ParameterStore`], call [`Graph::backward`] on a scalar, then fold the
//! gradients back into the store and take an [`AdamConfig`] step.

mod gemm;
mod gradcheck;
mod graph;
mod nn;
mod params;
mod tensor;

pub use gradcheck::{grad_check, grad_check_at, grad_check_store, relative_error, GRAD_CHECK_FLOOR};
pub use graph::{Gradients, Graph, Var};
pub use nn::{AttentionBlock, AttentionConfig, Conv2d, Linear, Mlp};
pub use params::{AdamConfig, Bindings, Param, ParameterStore, CHECKPOINT_FORMAT, CHECKPOINT_VERSION};
pub use tensor::Tensor;
