//! 2x2 max pooling with stride 2, recording argmax positions so a paired
//! unpooling layer can scatter values back to where the maxima came from.
//! Ties resolve to the first element in row-major scan order of the window.

use super::{missing_forward, Layer, Mode, StateItem};
use crate::error::{Result, SefcnError};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Argmax positions from a pooling forward pass. Each entry is `dy*2 + dx`
/// in 0..4, one per pooled output element, alongside the pooled shape.
#[derive(Clone, Debug)]
pub struct PoolIndices {
    shape: Vec<usize>,
    codes: Vec<u8>,
}

impl PoolIndices {
    /// Shape of the pooled output the indices belong to.
    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn codes(&self) -> &[u8] {
        &self.codes
    }
}

pub struct MaxPool2<T: Scalar> {
    cache: Option<(Vec<usize>, PoolIndices)>,
    _marker: std::marker::PhantomData<T>,
}

impl<T: Scalar> Default for MaxPool2<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> MaxPool2<T> {
    pub fn new() -> Self {
        Self {
            cache: None,
            _marker: std::marker::PhantomData,
        }
    }

    /// Indices recorded by the most recent forward pass.
    pub fn indices(&self) -> Option<&PoolIndices> {
        self.cache.as_ref().map(|(_, idx)| idx)
    }
}

impl<T: Scalar> Layer<T> for MaxPool2<T> {
    fn forward(&mut self, input: &Tensor<T>, _mode: Mode) -> Result<Tensor<T>> {
        let (n, c, h, w) = input.dims4()?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(SefcnError::shape(format!(
                "max_pool: spatial extents must be even, got {h}x{w}"
            )));
        }
        let (oh, ow) = (h / 2, w / 2);
        let mut out = Tensor::zeros(&[n, c, oh, ow])?;
        let mut codes = vec![0u8; n * c * oh * ow];
        for ni in 0..n {
            for ci in 0..c {
                let in_base = (ni * c + ci) * h * w;
                let out_base = (ni * c + ci) * oh * ow;
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut best = T::neg_infinity();
                        let mut best_code = 0u8;
                        for dy in 0..2 {
                            for dx in 0..2 {
                                let v =
                                    input.data()[in_base + (oy * 2 + dy) * w + ox * 2 + dx];
                                if v > best {
                                    best = v;
                                    best_code = (dy * 2 + dx) as u8;
                                }
                            }
                        }
                        out.data_mut()[out_base + oy * ow + ox] = best;
                        codes[out_base + oy * ow + ox] = best_code;
                    }
                }
            }
        }
        let indices = PoolIndices {
            shape: vec![n, c, oh, ow],
            codes,
        };
        self.cache = Some((input.shape().to_vec(), indices));
        Ok(out)
    }

    fn backward(&mut self, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
        let (in_shape, indices) = self
            .cache
            .as_ref()
            .ok_or_else(|| missing_forward("max_pool"))?;
        if grad_out.shape() != indices.shape() {
            return Err(SefcnError::shape(format!(
                "max_pool: gradient shape {:?} does not match pooled output {:?}",
                grad_out.shape(),
                indices.shape()
            )));
        }
        let mut din = Tensor::zeros(in_shape)?;
        scatter(grad_out, indices, &mut din)?;
        Ok(din)
    }

    fn visit_state(&mut self, _prefix: &str, _f: &mut dyn FnMut(StateItem<'_, T>)) {}
}

/// Scatters `src` (pooled shape) into `dst` (unpooled shape) at the recorded
/// argmax positions, adding to whatever `dst` holds.
fn scatter<T: Scalar>(src: &Tensor<T>, indices: &PoolIndices, dst: &mut Tensor<T>) -> Result<()> {
    let (n, c, oh, ow) = {
        let s = indices.shape();
        (s[0], s[1], s[2], s[3])
    };
    let (h, w) = (oh * 2, ow * 2);
    for ni in 0..n {
        for ci in 0..c {
            let src_base = (ni * c + ci) * oh * ow;
            let dst_base = (ni * c + ci) * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let code = indices.codes()[src_base + oy * ow + ox];
                    if code > 3 {
                        return Err(SefcnError::input(format!(
                            "max_unpool: corrupt pooling index {code} (must be 0..4)"
                        )));
                    }
                    let (dy, dx) = ((code / 2) as usize, (code % 2) as usize);
                    let di = dst_base + (oy * 2 + dy) * w + ox * 2 + dx;
                    dst.data_mut()[di] =
                        dst.data()[di] + src.data()[src_base + oy * ow + ox];
                }
            }
        }
    }
    Ok(())
}

/// Inverse of `MaxPool2`: places each input value at the position its paired
/// pooling pass took it from, zero elsewhere. Not a `Layer` because forward
/// needs the indices operand alongside the input.
pub struct MaxUnpool2<T: Scalar> {
    cache: Option<PoolIndices>,
    _marker: std::marker::PhantomData<T>,
}

impl<T: Scalar> Default for MaxUnpool2<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> MaxUnpool2<T> {
    pub fn new() -> Self {
        Self {
            cache: None,
            _marker: std::marker::PhantomData,
        }
    }

    pub fn forward(&mut self, input: &Tensor<T>, indices: &PoolIndices) -> Result<Tensor<T>> {
        if input.shape() != indices.shape() {
            return Err(SefcnError::shape(format!(
                "max_unpool: input shape {:?} does not match index shape {:?}",
                input.shape(),
                indices.shape()
            )));
        }
        let (n, c, oh, ow) = input.dims4()?;
        let mut out = Tensor::zeros(&[n, c, oh * 2, ow * 2])?;
        scatter(input, indices, &mut out)?;
        self.cache = Some(indices.clone());
        Ok(out)
    }

    pub fn backward(&mut self, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
        let indices = self
            .cache
            .as_ref()
            .ok_or_else(|| missing_forward("max_unpool"))?;
        let s = indices.shape();
        let expected = [s[0], s[1], s[2] * 2, s[3] * 2];
        if grad_out.shape() != expected {
            return Err(SefcnError::shape(format!(
                "max_unpool: gradient shape {:?} does not match output {:?}",
                grad_out.shape(),
                expected
            )));
        }
        // Gather: the gradient w.r.t. each input element is the output
        // gradient at the position it was scattered to.
        let (n, c, oh, ow) = (s[0], s[1], s[2], s[3]);
        let (h, w) = (oh * 2, ow * 2);
        let mut din = Tensor::zeros(&[n, c, oh, ow])?;
        for ni in 0..n {
            for ci in 0..c {
                let in_base = (ni * c + ci) * oh * ow;
                let out_base = (ni * c + ci) * h * w;
                for oy in 0..oh {
                    for ox in 0..ow {
                        let code = indices.codes()[in_base + oy * ow + ox];
                        let (dy, dx) = ((code / 2) as usize, (code % 2) as usize);
                        din.data_mut()[in_base + oy * ow + ox] =
                            grad_out.data()[out_base + (oy * 2 + dy) * w + ox * 2 + dx];
                    }
                }
            }
        }
        Ok(din)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pools_max_and_records_position() {
        let mut pool = MaxPool2::<f32>::new();
        let x = Tensor::new(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let y = pool.forward(&x, Mode::Train).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1, 1]);
        assert_eq!(y.data(), &[4.0]);
        assert_eq!(pool.indices().unwrap().codes(), &[3]); // dy=1, dx=1
    }

    #[test]
    fn ties_pick_first_in_scan_order() {
        let mut pool = MaxPool2::<f32>::new();
        let x = Tensor::new(&[1, 1, 2, 2], vec![5.0, 5.0, 5.0, 5.0]).unwrap();
        pool.forward(&x, Mode::Train).unwrap();
        assert_eq!(pool.indices().unwrap().codes(), &[0]);
    }

    #[test]
    fn odd_extent_is_rejected() {
        let mut pool = MaxPool2::<f32>::new();
        let x = Tensor::zeros(&[1, 1, 3, 4]).unwrap();
        assert!(pool.forward(&x, Mode::Train).is_err());
    }

    #[test]
    fn unpool_scatters_to_recorded_positions() {
        let mut pool = MaxPool2::<f32>::new();
        let x = Tensor::new(
            &[1, 1, 4, 4],
            vec![
                1.0, 2.0, 5.0, 6.0, //
                3.0, 4.0, 7.0, 8.0, //
                1.0, 1.0, 1.0, 1.0, //
                1.0, 9.0, 1.0, 1.0,
            ],
        )
        .unwrap();
        let pooled = pool.forward(&x, Mode::Train).unwrap();
        assert_eq!(pooled.data(), &[4.0, 8.0, 9.0, 1.0]);
        let mut unpool = MaxUnpool2::<f32>::new();
        let back = unpool
            .forward(&pooled, pool.indices().unwrap())
            .unwrap();
        assert_eq!(back.shape(), &[1, 1, 4, 4]);
        // maxima return to their source cells, everything else zero
        assert_eq!(back.data()[1 * 4 + 1], 4.0);
        assert_eq!(back.data()[1 * 4 + 3], 8.0);
        assert_eq!(back.data()[3 * 4 + 1], 9.0);
        assert_eq!(back.data()[2 * 4 + 2], 1.0);
        assert_eq!(back.data().iter().filter(|v| **v != 0.0).count(), 4);
    }

    #[test]
    fn pool_then_unpool_preserves_value_sum_of_maxima() {
        let mut pool = MaxPool2::<f32>::new();
        let vals: Vec<f32> = (0..64).map(|i| ((i * 37) % 13) as f32).collect();
        let x = Tensor::new(&[1, 2, 4, 8], vals).unwrap();
        let pooled = pool.forward(&x, Mode::Train).unwrap();
        let mut unpool = MaxUnpool2::<f32>::new();
        let back = unpool.forward(&pooled, pool.indices().unwrap()).unwrap();
        let pooled_sum: f32 = pooled.data().iter().sum();
        let back_sum: f32 = back.data().iter().sum();
        assert!((pooled_sum - back_sum).abs() < 1e-5);
    }

    #[test]
    fn corrupt_index_is_rejected() {
        let mut unpool = MaxUnpool2::<f32>::new();
        let x = Tensor::new(&[1, 1, 1, 1], vec![2.0]).unwrap();
        let bad = PoolIndices {
            shape: vec![1, 1, 1, 1],
            codes: vec![7],
        };
        assert!(unpool.forward(&x, &bad).is_err());
    }

    #[test]
    fn pool_backward_routes_gradient_to_argmax() {
        let mut pool = MaxPool2::<f32>::new();
        let x = Tensor::new(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        pool.forward(&x, Mode::Train).unwrap();
        let g = Tensor::new(&[1, 1, 1, 1], vec![10.0]).unwrap();
        let din = pool.backward(&g).unwrap();
        assert_eq!(din.data(), &[0.0, 0.0, 0.0, 10.0]);
    }
}
