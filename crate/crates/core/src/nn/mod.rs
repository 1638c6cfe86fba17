//! Small dense/convolutional network kernel with exact backpropagation.
//!
//! Tensors are row-major. Convolutional layers act on a single CxHxW example;
//! dense layers act on the last axis of any tensor, so a `[batch, width]`
//! input is processed as one matrix product.

pub mod checkpoint;
mod gemm;
pub mod gradcheck;
mod layers;
pub mod loss;
mod network;
pub mod optim;
mod tensor;

pub use checkpoint::{load_checkpoint, load_checkpoint_expecting, meta_value, save_checkpoint};
pub use gradcheck::{grad_check, grad_check_input, grad_check_with, loss_and_grads, Objective};
pub use layers::LayerSpec;
pub use loss::{loss_mse, loss_softmax_ce};
pub(crate) use network::init_layer;
pub use network::{accumulate, scale_grads, validate_specs, zero_grads, Cache, Gradients, LayerParams, ModelParams};
pub use optim::{OptimKind, OptimState};
pub use tensor::Tensor;
