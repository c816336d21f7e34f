//! Differentiable layers with explicit forward/backward passes.
//!
//! Every layer caches what its backward pass needs during `forward`;
//! `backward` consumes that cache and returns the gradient with respect to
//! the layer input, accumulating parameter gradients internally. A layer
//! instance is single-owner mutable state: forward/backward on one instance
//! must be externally serialized, distinct instances are independent.

mod activation;
mod batchnorm;
mod conv;
mod fc;
mod pool;
mod tconv;

pub use activation::{softmax_backward, softmax_channels, Relu, Sigmoid};
pub use batchnorm::BatchNorm;
pub use conv::Conv2d;
pub use fc::FullyConnected;
pub use pool::{MaxPool2, MaxUnpool2, PoolIndices};
pub use tconv::TransposedConv2;

use crate::error::{Result, SefcnError};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum Mode {
    Train,
    Eval,
}

/// Whether a state tensor is trained by the optimizer or merely tracked
/// (batch-norm running statistics).
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum StateRole {
    Param,
    Buffer,
}

/// One state tensor surfaced during visitation: its hierarchical name, the
/// kind of layer owning it (used to group gradient-check reports), its role,
/// the value, and the accumulated gradient (absent for buffers).
pub struct StateItem<'a, T> {
    pub name: String,
    pub kind: &'static str,
    pub role: StateRole,
    pub value: &'a mut Tensor<T>,
    pub grad: Option<&'a mut Tensor<T>>,
}

pub trait Layer<T: Scalar> {
    fn forward(&mut self, input: &Tensor<T>, mode: Mode) -> Result<Tensor<T>>;

    /// Gradient w.r.t. the input of the matching `forward` call; parameter
    /// gradients are accumulated into the layer's grad tensors.
    fn backward(&mut self, grad_out: &Tensor<T>) -> Result<Tensor<T>>;

    /// Visit state tensors in a stable order (checkpointing and the
    /// optimizer rely on it). Parameter-free layers visit nothing.
    fn visit_state(&mut self, _prefix: &str, _f: &mut dyn FnMut(StateItem<'_, T>)) {}
}

pub(crate) fn missing_forward(layer: &str) -> SefcnError {
    SefcnError::input(format!("{layer}: backward called before forward"))
}

/// Xavier-uniform bound for a layer with the given fan-in/fan-out.
pub(crate) fn xavier_bound(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

pub(crate) fn init_uniform<T: Scalar>(
    shape: &[usize],
    bound: f64,
    rng: &mut impl rand::Rng,
) -> Result<Tensor<T>> {
    let len: usize = shape.iter().product();
    let data = (0..len)
        .map(|_| T::from_f64(rng.random_range(-bound..bound)))
        .collect();
    Tensor::new(shape, data)
}
