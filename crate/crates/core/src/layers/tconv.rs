//! 2x2 stride-2 transposed convolution: the adjoint of a 2x2 stride-2
//! convolution, doubling both spatial extents. Because the kernel equals the
//! stride, every output pixel receives exactly one contribution, so the
//! forward pass is one GEMM per batch item followed by a pure scatter.

use super::{init_uniform, missing_forward, xavier_bound, Layer, Mode, StateItem, StateRole};
use crate::error::{Result, SefcnError};
use crate::scalar::{gemm, Scalar};
use crate::tensor::Tensor;

pub struct TransposedConv2<T: Scalar> {
    in_ch: usize,
    out_ch: usize,
    weight: Tensor<T>, // (in_ch, out_ch, 2, 2)
    bias: Option<Tensor<T>>,
    grad_weight: Tensor<T>,
    grad_bias: Option<Tensor<T>>,
    cache: Option<Tensor<T>>,
}

impl<T: Scalar> TransposedConv2<T> {
    pub fn new(
        in_ch: usize,
        out_ch: usize,
        with_bias: bool,
        rng: &mut impl rand::Rng,
    ) -> Result<Self> {
        if in_ch == 0 || out_ch == 0 {
            return Err(SefcnError::config(
                "transposed_conv2: channels must be positive",
            ));
        }
        let bound = xavier_bound(in_ch * 4, out_ch * 4);
        let weight = init_uniform(&[in_ch, out_ch, 2, 2], bound, rng)?;
        let bias = with_bias.then(|| Tensor::zeros(&[out_ch]).unwrap());
        Ok(Self {
            in_ch,
            out_ch,
            grad_weight: weight.zeros_like(),
            grad_bias: bias.as_ref().map(Tensor::zeros_like),
            weight,
            bias,
            cache: None,
        })
    }

    /// Share weights with a 2x2 stride-2 `Conv2d` kernel of shape
    /// `(co, ci, 2, 2)`: the transposed layer then maps `co -> ci` and the
    /// two layers are exact adjoints of each other.
    pub fn from_conv_weight(weight: &Tensor<T>) -> Result<Self> {
        let (co, ci, kh, kw) = weight.dims4()?;
        if kh != 2 || kw != 2 {
            return Err(SefcnError::shape(
                "transposed_conv2: shared kernel must be 2x2".to_string(),
            ));
        }
        Ok(Self {
            in_ch: co,
            out_ch: ci,
            grad_weight: weight.zeros_like(),
            weight: weight.clone(),
            bias: None,
            grad_bias: None,
            cache: None,
        })
    }
}

impl<T: Scalar> Layer<T> for TransposedConv2<T> {
    fn forward(&mut self, input: &Tensor<T>, _mode: Mode) -> Result<Tensor<T>> {
        let (n, ci, h, w) = input.dims4()?;
        if ci != self.in_ch {
            return Err(SefcnError::shape(format!(
                "transposed_conv2: input has {ci} channels, layer expects {}",
                self.in_ch
            )));
        }
        let co = self.out_ch;
        let p = h * w;
        let co4 = co * 4;
        let mut out = Tensor::zeros(&[n, co, 2 * h, 2 * w])?;
        let mut cols = vec![T::zero(); co4 * p];
        for ni in 0..n {
            let x_n = &input.data()[ni * ci * p..(ni + 1) * ci * p];
            // cols (Co*4, P) = W^T (Co*4, Ci) . x_n (Ci, P)
            gemm(
                co4,
                ci,
                p,
                T::one(),
                self.weight.data(),
                1,
                co4,
                x_n,
                p,
                1,
                T::zero(),
                &mut cols,
                p,
                1,
            );
            let out_n = &mut out.data_mut()[ni * co * 4 * p..(ni + 1) * co * 4 * p];
            for c in 0..co {
                let b = self.bias.as_ref().map_or(T::zero(), |bt| bt.data()[c]);
                for dy in 0..2 {
                    for dx in 0..2 {
                        let src = &cols[((c * 2 + dy) * 2 + dx) * p..][..p];
                        for y in 0..h {
                            let dst_row = (c * 2 * h + 2 * y + dy) * 2 * w + dx;
                            for x in 0..w {
                                out_n[dst_row + 2 * x] = src[y * w + x] + b;
                            }
                        }
                    }
                }
            }
        }
        self.cache = Some(input.clone());
        Ok(out)
    }

    fn backward(&mut self, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
        let input = self
            .cache
            .take()
            .ok_or_else(|| missing_forward("transposed_conv2"))?;
        let (n, ci, h, w) = input.dims4()?;
        let (gn, gc, gh, gw) = grad_out.dims4()?;
        if gn != n || gc != self.out_ch || gh != 2 * h || gw != 2 * w {
            return Err(SefcnError::shape(format!(
                "transposed_conv2: gradient shape {:?} does not match output shape [{n}, {}, {}, {}]",
                grad_out.shape(),
                self.out_ch,
                2 * h,
                2 * w
            )));
        }
        let co = self.out_ch;
        let p = h * w;
        let co4 = co * 4;
        let mut din = input.zeros_like();
        let mut cols = vec![T::zero(); co4 * p];
        for ni in 0..n {
            let g_n = &grad_out.data()[ni * co * 4 * p..(ni + 1) * co * 4 * p];
            // Gather the output gradient into column layout (Co*4, P).
            for c in 0..co {
                for dy in 0..2 {
                    for dx in 0..2 {
                        let dst = &mut cols[((c * 2 + dy) * 2 + dx) * p..][..p];
                        for y in 0..h {
                            let src_row = (c * 2 * h + 2 * y + dy) * 2 * w + dx;
                            for x in 0..w {
                                dst[y * w + x] = g_n[src_row + 2 * x];
                            }
                        }
                    }
                }
            }
            if let Some(gb) = &mut self.grad_bias {
                let gb = gb.data_mut();
                for c in 0..co {
                    let s: T = g_n[c * 4 * p..(c + 1) * 4 * p].iter().copied().sum();
                    gb[c] = gb[c] + s;
                }
            }
            let x_n = &input.data()[ni * ci * p..(ni + 1) * ci * p];
            // dW (Ci, Co*4) += x_n (Ci, P) . cols^T (P, Co*4)
            gemm(
                ci,
                p,
                co4,
                T::one(),
                x_n,
                p,
                1,
                &cols,
                1,
                p,
                T::one(),
                self.grad_weight.data_mut(),
                co4,
                1,
            );
            // din (Ci, P) = W (Ci, Co*4) . cols (Co*4, P)
            let d_n = &mut din.data_mut()[ni * ci * p..(ni + 1) * ci * p];
            gemm(
                ci,
                co4,
                p,
                T::one(),
                self.weight.data(),
                co4,
                1,
                &cols,
                p,
                1,
                T::zero(),
                d_n,
                p,
                1,
            );
        }
        Ok(din)
    }

    fn visit_state(&mut self, prefix: &str, f: &mut dyn FnMut(StateItem<'_, T>)) {
        f(StateItem {
            name: format!("{prefix}.weight"),
            kind: "transposed_conv2",
            role: StateRole::Param,
            value: &mut self.weight,
            grad: Some(&mut self.grad_weight),
        });
        if let (Some(b), Some(gb)) = (&mut self.bias, &mut self.grad_bias) {
            f(StateItem {
                name: format!("{prefix}.bias"),
                kind: "transposed_conv2",
                role: StateRole::Param,
                value: b,
                grad: Some(gb),
            });
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn single_pixel_becomes_2x2_patch() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut up = TransposedConv2::<f32>::new(1, 1, false, &mut rng).unwrap();
        for v in up.weight.data_mut() {
            *v = 1.0;
        }
        let x = Tensor::new(&[1, 1, 1, 1], vec![3.5]).unwrap();
        let y = up.forward(&x, Mode::Train).unwrap();
        assert_eq!(y.shape(), &[1, 1, 2, 2]);
        assert!(y.data().iter().all(|&v| v == 3.5));
    }

    #[test]
    fn doubles_spatial_extents() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut up = TransposedConv2::<f32>::new(3, 5, true, &mut rng).unwrap();
        let x = Tensor::<f32>::zeros(&[1, 3, 8, 8]).unwrap();
        let y = up.forward(&x, Mode::Train).unwrap();
        assert_eq!(y.shape(), &[1, 5, 16, 16]);
    }
}
