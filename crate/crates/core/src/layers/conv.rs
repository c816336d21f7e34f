//! 2-D convolution (cross-correlation, no kernel flip) with zero padding.
//!
//! The forward pass lowers each batch item to column matrices in fixed
//! position blocks and multiplies them against the flattened kernel with one
//! GEMM per block, writing disjoint slices of a transposed output buffer (so
//! a parallel block loop is bit-deterministic regardless of thread count).
//! The backward pass rebuilds the same column blocks sequentially in a fixed
//! order and accumulates the kernel gradient and the scattered input
//! gradient from them. 1x1 kernels at stride 1 skip the lowering entirely.

use rayon::prelude::*;

use super::{init_uniform, missing_forward, xavier_bound, Layer, Mode, StateItem, StateRole};
use crate::error::{Result, SefcnError};
use crate::scalar::{gemm, Scalar};
use crate::tensor::Tensor;

/// Positions handled per lowered GEMM block.
const COL_BLOCK: usize = 1024;

pub struct Conv2d<T: Scalar> {
    in_ch: usize,
    out_ch: usize,
    k: usize,
    stride: usize,
    pad: usize,
    weight: Tensor<T>, // (out_ch, in_ch, k, k)
    bias: Option<Tensor<T>>,
    grad_weight: Tensor<T>,
    grad_bias: Option<Tensor<T>>,
    cache: Option<Tensor<T>>,
}

impl<T: Scalar> Conv2d<T> {
    pub fn new(
        in_ch: usize,
        out_ch: usize,
        k: usize,
        stride: usize,
        pad: usize,
        with_bias: bool,
        rng: &mut impl rand::Rng,
    ) -> Result<Self> {
        if in_ch == 0 || out_ch == 0 || k == 0 || stride == 0 {
            return Err(SefcnError::config(
                "conv2d: channels, kernel and stride must be positive",
            ));
        }
        let bound = xavier_bound(in_ch * k * k, out_ch * k * k);
        let weight = init_uniform(&[out_ch, in_ch, k, k], bound, rng)?;
        let bias = with_bias.then(|| Tensor::zeros(&[out_ch]).unwrap());
        Ok(Self {
            in_ch,
            out_ch,
            k,
            stride,
            pad,
            grad_weight: weight.zeros_like(),
            grad_bias: bias.as_ref().map(Tensor::zeros_like),
            weight,
            bias,
            cache: None,
        })
    }

    /// "Same"-padded stride-1 convolution with bias; requires an odd kernel
    /// so that the spatial extents are preserved exactly.
    pub fn same(in_ch: usize, out_ch: usize, k: usize, rng: &mut impl rand::Rng) -> Result<Self> {
        if k % 2 == 0 {
            return Err(SefcnError::config(format!(
                "conv2d: same padding requires an odd kernel, got {k}"
            )));
        }
        Self::new(in_ch, out_ch, k, 1, (k - 1) / 2, true, rng)
    }

    pub fn weight(&self) -> &Tensor<T> {
        &self.weight
    }

    pub fn weight_mut(&mut self) -> &mut Tensor<T> {
        &mut self.weight
    }

    pub fn out_dims(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let hp = h + 2 * self.pad;
        let wp = w + 2 * self.pad;
        if hp < self.k || wp < self.k {
            return Err(SefcnError::shape(format!(
                "conv2d: padded input {hp}x{wp} smaller than kernel {}",
                self.k
            )));
        }
        Ok(((hp - self.k) / self.stride + 1, (wp - self.k) / self.stride + 1))
    }

    /// Lower the positions `[start, start+nb)` of image `x_n` (layout
    /// `(C, H, W)`) into `col_t` (layout `(nb, in_ch*k*k)`).
    #[allow(clippy::too_many_arguments)]
    fn fill_col_block(
        &self,
        x_n: &[T],
        h: usize,
        w: usize,
        ow: usize,
        start: usize,
        nb: usize,
        col_t: &mut [T],
    ) {
        let k = self.k;
        let kdim = self.in_ch * k * k;
        for j in 0..nb {
            let pos = start + j;
            let oy = pos / ow;
            let ox = pos % ow;
            let y0 = (oy * self.stride) as isize - self.pad as isize;
            let x0 = (ox * self.stride) as isize - self.pad as isize;
            let row = &mut col_t[j * kdim..(j + 1) * kdim];
            let mut q = 0;
            for ci in 0..self.in_ch {
                let plane = &x_n[ci * h * w..(ci + 1) * h * w];
                for dy in 0..k {
                    let yy = y0 + dy as isize;
                    if yy < 0 || yy >= h as isize {
                        for slot in &mut row[q..q + k] {
                            *slot = T::zero();
                        }
                        q += k;
                        continue;
                    }
                    let line = &plane[yy as usize * w..(yy as usize + 1) * w];
                    for dx in 0..k {
                        let xx = x0 + dx as isize;
                        row[q] = if xx < 0 || xx >= w as isize {
                            T::zero()
                        } else {
                            line[xx as usize]
                        };
                        q += 1;
                    }
                }
            }
        }
    }

    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }
}

impl<T: Scalar> Layer<T> for Conv2d<T> {
    fn forward(&mut self, input: &Tensor<T>, _mode: Mode) -> Result<Tensor<T>> {
        let (n, ci, h, w) = input.dims4()?;
        if ci != self.in_ch {
            return Err(SefcnError::shape(format!(
                "conv2d: input has {ci} channels, layer expects {}",
                self.in_ch
            )));
        }
        let (oh, ow) = self.out_dims(h, w)?;
        let p_out = oh * ow;
        let co = self.out_ch;
        let mut out = Tensor::zeros(&[n, co, oh, ow])?;

        if self.is_pointwise() {
            // out_n (Co, P) = W (Co, Ci) . x_n (Ci, P)
            for ni in 0..n {
                let x_n = &input.data()[ni * ci * p_out..(ni + 1) * ci * p_out];
                let out_n = &mut out.data_mut()[ni * co * p_out..(ni + 1) * co * p_out];
                gemm(
                    co,
                    ci,
                    p_out,
                    T::one(),
                    self.weight.data(),
                    ci,
                    1,
                    x_n,
                    p_out,
                    1,
                    T::zero(),
                    out_n,
                    p_out,
                    1,
                );
            }
        } else {
            let kdim = ci * self.k * self.k;
            // Transposed layout (P, Co) per batch item: each position block is
            // a contiguous chunk, so blocks can be computed independently.
            let mut out_t = vec![T::zero(); n * p_out * co];
            let weight = self.weight.data();
            for ni in 0..n {
                let x_n = &input.data()[ni * ci * h * w..(ni + 1) * ci * h * w];
                out_t[ni * p_out * co..(ni + 1) * p_out * co]
                    .par_chunks_mut(COL_BLOCK * co)
                    .enumerate()
                    .for_each(|(bi, chunk)| {
                        let start = bi * COL_BLOCK;
                        let nb = chunk.len() / co;
                        let mut col_t = vec![T::zero(); nb * kdim];
                        self.fill_col_block(x_n, h, w, ow, start, nb, &mut col_t);
                        // chunk (nb, Co) = col_t (nb, kdim) . W^T (kdim, Co)
                        gemm(
                            nb,
                            kdim,
                            co,
                            T::one(),
                            &col_t,
                            kdim,
                            1,
                            weight,
                            1,
                            kdim,
                            T::zero(),
                            chunk,
                            co,
                            1,
                        );
                    });
            }
            let out_data = out.data_mut();
            for ni in 0..n {
                for c in 0..co {
                    let dst = &mut out_data[(ni * co + c) * p_out..(ni * co + c + 1) * p_out];
                    let src = &out_t[ni * p_out * co..];
                    for (pos, v) in dst.iter_mut().enumerate() {
                        *v = src[pos * co + c];
                    }
                }
            }
        }

        if let Some(bias) = &self.bias {
            let out_data = out.data_mut();
            for ni in 0..n {
                for (c, &b) in bias.data().iter().enumerate() {
                    for v in &mut out_data[(ni * co + c) * p_out..(ni * co + c + 1) * p_out] {
                        *v = *v + b;
                    }
                }
            }
        }

        self.cache = Some(input.clone());
        Ok(out)
    }

    fn backward(&mut self, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
        let input = self.cache.take().ok_or_else(|| missing_forward("conv2d"))?;
        let (n, ci, h, w) = input.dims4()?;
        let (gn, gc, oh, ow) = grad_out.dims4()?;
        let (eh, ew) = self.out_dims(h, w)?;
        if gn != n || gc != self.out_ch || oh != eh || ow != ew {
            return Err(SefcnError::shape(format!(
                "conv2d: gradient shape {:?} does not match output shape [{n}, {}, {eh}, {ew}]",
                grad_out.shape(),
                self.out_ch
            )));
        }
        let p_out = oh * ow;
        let co = self.out_ch;

        if let Some(gb) = &mut self.grad_bias {
            let gb = gb.data_mut();
            for ni in 0..n {
                for c in 0..co {
                    let s: T = grad_out.data()[(ni * co + c) * p_out..(ni * co + c + 1) * p_out]
                        .iter()
                        .copied()
                        .sum();
                    gb[c] = gb[c] + s;
                }
            }
        }

        let mut din = input.zeros_like();

        if self.is_pointwise() {
            for ni in 0..n {
                let x_n = &input.data()[ni * ci * p_out..(ni + 1) * ci * p_out];
                let g_n = &grad_out.data()[ni * co * p_out..(ni + 1) * co * p_out];
                // dW (Co, Ci) += g_n (Co, P) . x_n^T (P, Ci)
                gemm(
                    co,
                    p_out,
                    ci,
                    T::one(),
                    g_n,
                    p_out,
                    1,
                    x_n,
                    1,
                    p_out,
                    T::one(),
                    self.grad_weight.data_mut(),
                    ci,
                    1,
                );
                // din_n (Ci, P) = W^T (Ci, Co) . g_n (Co, P)
                let d_n = &mut din.data_mut()[ni * ci * p_out..(ni + 1) * ci * p_out];
                gemm(
                    ci,
                    co,
                    p_out,
                    T::one(),
                    self.weight.data(),
                    1,
                    ci,
                    g_n,
                    p_out,
                    1,
                    T::zero(),
                    d_n,
                    p_out,
                    1,
                );
            }
            return Ok(din);
        }

        let k = self.k;
        let kdim = ci * k * k;
        let mut col_t = vec![T::zero(); COL_BLOCK * kdim];
        let mut col_grad_t = vec![T::zero(); COL_BLOCK * kdim];
        for ni in 0..n {
            let x_n = &input.data()[ni * ci * h * w..(ni + 1) * ci * h * w];
            let g_n = &grad_out.data()[ni * co * p_out..(ni + 1) * co * p_out];
            let din_n = &mut din.data_mut()[ni * ci * h * w..(ni + 1) * ci * h * w];
            let mut start = 0;
            while start < p_out {
                let nb = COL_BLOCK.min(p_out - start);
                self.fill_col_block(x_n, h, w, ow, start, nb, &mut col_t);
                // dW (Co, kdim) += g_n[:, start..] (Co, nb) . col_t (nb, kdim)
                gemm(
                    co,
                    nb,
                    kdim,
                    T::one(),
                    &g_n[start..],
                    p_out,
                    1,
                    &col_t,
                    kdim,
                    1,
                    T::one(),
                    self.grad_weight.data_mut(),
                    kdim,
                    1,
                );
                // col_grad_t (nb, kdim) = g_n[:, start..]^T (nb, Co) . W (Co, kdim)
                gemm(
                    nb,
                    co,
                    kdim,
                    T::one(),
                    &g_n[start..],
                    1,
                    p_out,
                    self.weight.data(),
                    kdim,
                    1,
                    T::zero(),
                    &mut col_grad_t,
                    kdim,
                    1,
                );
                // Scatter the column gradients back onto the input grid.
                for j in 0..nb {
                    let pos = start + j;
                    let oy = pos / ow;
                    let ox = pos % ow;
                    let y0 = (oy * self.stride) as isize - self.pad as isize;
                    let x0 = (ox * self.stride) as isize - self.pad as isize;
                    let row = &col_grad_t[j * kdim..(j + 1) * kdim];
                    let mut q = 0;
                    for c in 0..ci {
                        for dy in 0..k {
                            let yy = y0 + dy as isize;
                            if yy < 0 || yy >= h as isize {
                                q += k;
                                continue;
                            }
                            let line_base = c * h * w + yy as usize * w;
                            for dx in 0..k {
                                let xx = x0 + dx as isize;
                                if xx >= 0 && xx < w as isize {
                                    let idx = line_base + xx as usize;
                                    din_n[idx] = din_n[idx] + row[q];
                                }
                                q += 1;
                            }
                        }
                    }
                }
                start += nb;
            }
        }
        Ok(din)
    }

    fn visit_state(&mut self, prefix: &str, f: &mut dyn FnMut(StateItem<'_, T>)) {
        f(StateItem {
            name: format!("{prefix}.weight"),
            kind: "conv2d",
            role: StateRole::Param,
            value: &mut self.weight,
            grad: Some(&mut self.grad_weight),
        });
        if let (Some(b), Some(gb)) = (&mut self.bias, &mut self.grad_bias) {
            f(StateItem {
                name: format!("{prefix}.bias"),
                kind: "conv2d",
                role: StateRole::Param,
                value: b,
                grad: Some(gb),
            });
        }
    }
}
