//! Minimal differentiable core: layered networks with shared trunk and
//! named heads, reverse-mode gradients, and Nesterov SGD.

pub mod checkpoint;
mod kernels;
pub mod loss;
pub mod network;
pub mod objective;
pub mod optim;
pub mod tensor;

pub use loss::{cross_entropy, kl_to_uniform, softmax, CrossEntropy, LogitLoss, UniformTarget};
pub use network::{backward, forward_trace, Gradients, Layer, NetworkSpec, ParameterSet, Trace};
pub use objective::{
    evaluate, forward_logits, input_gradient, loss_and_param_grads, loss_value, Evaluation,
    Objective, Term,
};
pub use optim::{cosine_lr, sgd_update, OptimizerState, SgdConfig};
pub use tensor::{Scalar, Tensor};
