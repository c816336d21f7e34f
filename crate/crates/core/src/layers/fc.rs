//! Bias-free fully connected layer over rank-2 `(N, in)` activations; rows
//! of the weight matrix are output units.

use super::{init_uniform, missing_forward, xavier_bound, Layer, Mode, StateItem, StateRole};
use crate::error::{Result, SefcnError};
use crate::scalar::{gemm, Scalar};
use crate::tensor::Tensor;

pub struct FullyConnected<T: Scalar> {
    in_dim: usize,
    out_dim: usize,
    weight: Tensor<T>, // (out_dim, in_dim)
    grad_weight: Tensor<T>,
    cache: Option<Tensor<T>>,
}

impl<T: Scalar> FullyConnected<T> {
    pub fn new(in_dim: usize, out_dim: usize, rng: &mut impl rand::Rng) -> Result<Self> {
        if in_dim == 0 || out_dim == 0 {
            return Err(SefcnError::config(
                "fully_connected: dimensions must be positive",
            ));
        }
        let weight = init_uniform(&[out_dim, in_dim], xavier_bound(in_dim, out_dim), rng)?;
        Ok(Self {
            in_dim,
            out_dim,
            grad_weight: weight.zeros_like(),
            weight,
            cache: None,
        })
    }

    pub fn weight_mut(&mut self) -> &mut Tensor<T> {
        &mut self.weight
    }
}

impl<T: Scalar> Layer<T> for FullyConnected<T> {
    fn forward(&mut self, input: &Tensor<T>, _mode: Mode) -> Result<Tensor<T>> {
        let (n, d) = input.dims2()?;
        if d != self.in_dim {
            return Err(SefcnError::shape(format!(
                "fully_connected: input extent {d} does not match weight inner extent {}",
                self.in_dim
            )));
        }
        let mut out = Tensor::zeros(&[n, self.out_dim])?;
        // out (N, out) = x (N, in) . W^T (in, out)
        gemm(
            n,
            d,
            self.out_dim,
            T::one(),
            input.data(),
            d,
            1,
            self.weight.data(),
            1,
            d,
            T::zero(),
            out.data_mut(),
            self.out_dim,
            1,
        );
        self.cache = Some(input.clone());
        Ok(out)
    }

    fn backward(&mut self, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
        let input = self
            .cache
            .take()
            .ok_or_else(|| missing_forward("fully_connected"))?;
        let (n, d) = input.dims2()?;
        let (gn, go) = grad_out.dims2()?;
        if gn != n || go != self.out_dim {
            return Err(SefcnError::shape(format!(
                "fully_connected: gradient shape {:?} does not match output [{n}, {}]",
                grad_out.shape(),
                self.out_dim
            )));
        }
        // dW (out, in) += g^T (out, N) . x (N, in)
        gemm(
            self.out_dim,
            n,
            d,
            T::one(),
            grad_out.data(),
            1,
            self.out_dim,
            input.data(),
            d,
            1,
            T::one(),
            self.grad_weight.data_mut(),
            d,
            1,
        );
        // dx (N, in) = g (N, out) . W (out, in)
        let mut din = input.zeros_like();
        gemm(
            n,
            self.out_dim,
            d,
            T::one(),
            grad_out.data(),
            self.out_dim,
            1,
            self.weight.data(),
            d,
            1,
            T::zero(),
            din.data_mut(),
            d,
            1,
        );
        Ok(din)
    }

    fn visit_state(&mut self, prefix: &str, f: &mut dyn FnMut(StateItem<'_, T>)) {
        f(StateItem {
            name: format!("{prefix}.weight"),
            kind: "fully_connected",
            role: StateRole::Param,
            value: &mut self.weight,
            grad: Some(&mut self.grad_weight),
        });
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(3)
    }

    #[test]
    fn identity_weights_pass_through() {
        let mut fc = FullyConnected::<f32>::new(2, 2, &mut rng()).unwrap();
        fc.weight.data_mut().copy_from_slice(&[1.0, 0.0, 0.0, 1.0]);
        let x = Tensor::new(&[1, 2], vec![3.0, -4.0]).unwrap();
        assert_eq!(fc.forward(&x, Mode::Train).unwrap().data(), &[3.0, -4.0]);
    }

    #[test]
    fn zero_weights_zero_output() {
        let mut fc = FullyConnected::<f32>::new(3, 2, &mut rng()).unwrap();
        for v in fc.weight.data_mut() {
            *v = 0.0;
        }
        let x = Tensor::new(&[1, 3], vec![1.0, 2.0, 3.0]).unwrap();
        assert!(fc
            .forward(&x, Mode::Train)
            .unwrap()
            .data()
            .iter()
            .all(|&v| v == 0.0));
    }

    #[test]
    fn row_major_rows_are_outputs() {
        let mut fc = FullyConnected::<f32>::new(2, 2, &mut rng()).unwrap();
        fc.weight.data_mut().copy_from_slice(&[1.0, 2.0, 3.0, 4.0]);
        let x = Tensor::new(&[1, 2], vec![1.0, 1.0]).unwrap();
        assert_eq!(fc.forward(&x, Mode::Train).unwrap().data(), &[3.0, 7.0]);
    }

    #[test]
    fn extent_mismatch_is_a_shape_error() {
        let mut fc = FullyConnected::<f32>::new(2, 2, &mut rng()).unwrap();
        let x = Tensor::new(&[1, 3], vec![0.0; 3]).unwrap();
        assert!(fc.forward(&x, Mode::Train).is_err());
    }
}
