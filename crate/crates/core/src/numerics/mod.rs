//! Differentiable tensor kernel: dense tensors, a reverse-mode tape,
//! layers, optimizers, a finite-difference checker and checkpoint I/O.

pub mod checkpoint;
pub mod gradcheck;
pub mod graph;
pub mod kernels;
pub mod nn;
pub mod optim;
pub mod params;
pub mod tensor;

pub use gradcheck::{GradCheck, GradCheckReport, Violation};
pub use graph::{DetachedValues, Grads, Graph, Var};
pub use nn::{linear, FeedForward, LayerNorm, Linear, MultiHeadAttention, TransformerBlock};
pub use optim::Adam;
pub use params::ParamStore;
pub use tensor::Tensor;
