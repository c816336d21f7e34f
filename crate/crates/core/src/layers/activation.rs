//! Element-wise activations and the channel softmax.

use super::{missing_forward, Layer, Mode};
use crate::error::Result;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Default)]
pub struct Relu<T> {
    cache: Option<Tensor<T>>,
}

impl<T: Scalar> Relu<T> {
    pub fn new() -> Self {
        Self { cache: None }
    }
}

impl<T: Scalar> Layer<T> for Relu<T> {
    fn forward(&mut self, input: &Tensor<T>, _mode: Mode) -> Result<Tensor<T>> {
        let out = input.map(|v| if v > T::zero() { v } else { T::zero() });
        self.cache = Some(out.clone());
        Ok(out)
    }

    fn backward(&mut self, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
        let out = self.cache.take().ok_or_else(|| missing_forward("relu"))?;
        grad_out.zip_mask(&out)
    }
}

#[derive(Default)]
pub struct Sigmoid<T> {
    cache: Option<Tensor<T>>,
}

impl<T: Scalar> Sigmoid<T> {
    pub fn new() -> Self {
        Self { cache: None }
    }
}

pub(crate) fn sigmoid_scalar<T: Scalar>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

impl<T: Scalar> Layer<T> for Sigmoid<T> {
    fn forward(&mut self, input: &Tensor<T>, _mode: Mode) -> Result<Tensor<T>> {
        let out = input.map(sigmoid_scalar);
        self.cache = Some(out.clone());
        Ok(out)
    }

    fn backward(&mut self, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
        let out = self
            .cache
            .take()
            .ok_or_else(|| missing_forward("sigmoid"))?;
        let dsig = out.map(|s| s * (T::one() - s));
        grad_out.mul(&dsig)
    }
}

impl<T: Scalar> Tensor<T> {
    /// `grad * (mask > 0)`, used by the ReLU backward.
    fn zip_mask(&self, mask: &Tensor<T>) -> Result<Tensor<T>> {
        self.mul(&mask.map(|v| if v > T::zero() { T::one() } else { T::zero() }))
    }
}

/// Per-pixel softmax over the channel axis, computed with max-subtraction so
/// large logits cannot overflow.
pub fn softmax_channels<T: Scalar>(logits: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c, h, w) = logits.dims4()?;
    let hw = h * w;
    let mut out = logits.clone();
    let data = out.data_mut();
    for ni in 0..n {
        for pix in 0..hw {
            let base = ni * c * hw + pix;
            let mut m = data[base];
            for ci in 1..c {
                let v = data[base + ci * hw];
                if v > m {
                    m = v;
                }
            }
            let mut sum = T::zero();
            for ci in 0..c {
                let e = (data[base + ci * hw] - m).exp();
                data[base + ci * hw] = e;
                sum = sum + e;
            }
            for ci in 0..c {
                data[base + ci * hw] = data[base + ci * hw] / sum;
            }
        }
    }
    Ok(out)
}

/// Pull a gradient w.r.t. softmax outputs back to the logits:
/// `dlogit_c = p_c * (dprob_c - sum_j dprob_j * p_j)` per pixel.
pub fn softmax_backward<T: Scalar>(probs: &Tensor<T>, dprobs: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c, h, w) = probs.dims4()?;
    let hw = h * w;
    let mut out = probs.zeros_like();
    let o = out.data_mut();
    for ni in 0..n {
        for pix in 0..hw {
            let base = ni * c * hw + pix;
            let mut dot = T::zero();
            for ci in 0..c {
                dot = dot + dprobs.data()[base + ci * hw] * probs.data()[base + ci * hw];
            }
            for ci in 0..c {
                let idx = base + ci * hw;
                o[idx] = probs.data()[idx] * (dprobs.data()[idx] - dot);
            }
        }
    }
    Ok(out)
}
