//! Per-channel batch normalization. Training mode normalizes by batch
//! statistics (biased variance) and updates running statistics with momentum
//! 0.1; eval mode normalizes by the running statistics (initialized to mean
//! 0, variance 1, so eval before any training step is well-defined).

use super::{missing_forward, Layer, Mode, StateItem, StateRole};
use crate::error::{Result, SefcnError};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const BN_MOMENTUM: f64 = 0.1;
pub const BN_EPS: f64 = 1e-5;

pub struct BatchNorm<T: Scalar> {
    c: usize,
    gamma: Tensor<T>,
    beta: Tensor<T>,
    running_mean: Tensor<T>,
    running_var: Tensor<T>,
    grad_gamma: Tensor<T>,
    grad_beta: Tensor<T>,
    cache: Option<BnCache<T>>,
}

struct BnCache<T> {
    input: Tensor<T>,
    mean: Vec<T>,
    inv_std: Vec<T>,
    mode: Mode,
}

impl<T: Scalar> BatchNorm<T> {
    pub fn new(c: usize) -> Result<Self> {
        if c == 0 {
            return Err(SefcnError::config("batch_norm: channels must be positive"));
        }
        Ok(Self {
            c,
            gamma: Tensor::filled(&[c], T::one())?,
            beta: Tensor::zeros(&[c])?,
            running_mean: Tensor::zeros(&[c])?,
            running_var: Tensor::filled(&[c], T::one())?,
            grad_gamma: Tensor::zeros(&[c])?,
            grad_beta: Tensor::zeros(&[c])?,
            cache: None,
        })
    }
}

impl<T: Scalar> Layer<T> for BatchNorm<T> {
    fn forward(&mut self, input: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let (n, c, h, w) = input.dims4()?;
        if c != self.c {
            return Err(SefcnError::shape(format!(
                "batch_norm: input has {c} channels, layer expects {}",
                self.c
            )));
        }
        let hw = h * w;
        let count = n * hw;
        let eps = T::from_f64(BN_EPS);

        let (mean, inv_std) = match mode {
            Mode::Train => {
                if count < 2 {
                    return Err(SefcnError::input(format!(
                        "batch_norm: training needs at least 2 values per channel, got {count}"
                    )));
                }
                let inv_count = T::from_f64(1.0 / count as f64);
                let mut mean = vec![T::zero(); c];
                let mut var = vec![T::zero(); c];
                for ci in 0..c {
                    let mut s = T::zero();
                    for ni in 0..n {
                        let base = (ni * c + ci) * hw;
                        s = s + input.data()[base..base + hw].iter().copied().sum();
                    }
                    mean[ci] = s * inv_count;
                    let mut sq = T::zero();
                    for ni in 0..n {
                        let base = (ni * c + ci) * hw;
                        for &v in &input.data()[base..base + hw] {
                            let d = v - mean[ci];
                            sq = sq + d * d;
                        }
                    }
                    var[ci] = sq * inv_count;
                }
                let m = T::from_f64(BN_MOMENTUM);
                let keep = T::one() - m;
                for ci in 0..c {
                    let rm = self.running_mean.data_mut();
                    rm[ci] = keep * rm[ci] + m * mean[ci];
                    let rv = self.running_var.data_mut();
                    rv[ci] = keep * rv[ci] + m * var[ci];
                }
                let inv_std: Vec<T> =
                    var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
                (mean, inv_std)
            }
            Mode::Eval => {
                let mean = self.running_mean.data().to_vec();
                let inv_std = self
                    .running_var
                    .data()
                    .iter()
                    .map(|&v| T::one() / (v + eps).sqrt())
                    .collect();
                (mean, inv_std)
            }
        };

        let mut out = input.clone();
        for ni in 0..n {
            for ci in 0..c {
                let g = self.gamma.data()[ci];
                let b = self.beta.data()[ci];
                let m = mean[ci];
                let is = inv_std[ci];
                let base = (ni * c + ci) * hw;
                for v in &mut out.data_mut()[base..base + hw] {
                    *v = g * (*v - m) * is + b;
                }
            }
        }
        self.cache = Some(BnCache {
            input: input.clone(),
            mean,
            inv_std,
            mode,
        });
        Ok(out)
    }

    fn backward(&mut self, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
        let cache = self
            .cache
            .take()
            .ok_or_else(|| missing_forward("batch_norm"))?;
        let input = &cache.input;
        let (n, c, h, w) = input.dims4()?;
        if grad_out.shape() != input.shape() {
            return Err(SefcnError::shape(format!(
                "batch_norm: gradient shape {:?} does not match input {:?}",
                grad_out.shape(),
                input.shape()
            )));
        }
        let hw = h * w;
        let count = n * hw;
        let inv_count = T::from_f64(1.0 / count as f64);
        let mut din = input.zeros_like();

        for ci in 0..c {
            let m = cache.mean[ci];
            let is = cache.inv_std[ci];
            let g = self.gamma.data()[ci];
            let mut sum_dy = T::zero();
            let mut sum_dy_xhat = T::zero();
            for ni in 0..n {
                let base = (ni * c + ci) * hw;
                for i in base..base + hw {
                    let dy = grad_out.data()[i];
                    let xhat = (input.data()[i] - m) * is;
                    sum_dy = sum_dy + dy;
                    sum_dy_xhat = sum_dy_xhat + dy * xhat;
                }
            }
            self.grad_beta.data_mut()[ci] = self.grad_beta.data()[ci] + sum_dy;
            self.grad_gamma.data_mut()[ci] = self.grad_gamma.data()[ci] + sum_dy_xhat;

            match cache.mode {
                Mode::Train => {
                    // dx = gamma*is/m * (m*dy - sum_dy - xhat*sum_dy_xhat)
                    let scale = g * is * inv_count;
                    let cnt = T::from_f64(count as f64);
                    for ni in 0..n {
                        let base = (ni * c + ci) * hw;
                        for i in base..base + hw {
                            let dy = grad_out.data()[i];
                            let xhat = (input.data()[i] - m) * is;
                            din.data_mut()[i] =
                                scale * (cnt * dy - sum_dy - xhat * sum_dy_xhat);
                        }
                    }
                }
                Mode::Eval => {
                    // Running statistics are constants w.r.t. the input.
                    let scale = g * is;
                    for ni in 0..n {
                        let base = (ni * c + ci) * hw;
                        for i in base..base + hw {
                            din.data_mut()[i] = grad_out.data()[i] * scale;
                        }
                    }
                }
            }
        }
        Ok(din)
    }

    fn visit_state(&mut self, prefix: &str, f: &mut dyn FnMut(StateItem<'_, T>)) {
        f(StateItem {
            name: format!("{prefix}.gamma"),
            kind: "batch_norm",
            role: StateRole::Param,
            value: &mut self.gamma,
            grad: Some(&mut self.grad_gamma),
        });
        f(StateItem {
            name: format!("{prefix}.beta"),
            kind: "batch_norm",
            role: StateRole::Param,
            value: &mut self.beta,
            grad: Some(&mut self.grad_beta),
        });
        f(StateItem {
            name: format!("{prefix}.running_mean"),
            kind: "batch_norm",
            role: StateRole::Buffer,
            value: &mut self.running_mean,
            grad: None,
        });
        f(StateItem {
            name: format!("{prefix}.running_var"),
            kind: "batch_norm",
            role: StateRole::Buffer,
            value: &mut self.running_var,
            grad: None,
        });
    }
}
