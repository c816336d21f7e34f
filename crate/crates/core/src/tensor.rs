//! Dense tensor value type. Shapes have one to four positive extents,
//! interpreted as `(N, C, H, W)` with trailing dimensions optional; data is
//! contiguous and row-major.
//!
//! There is deliberately no general broadcasting: the only shape-flexible
//! operations are [`Tensor::scale_channels`] and [`Tensor::scale_spatial`],
//! which accept a gate tensor with batch extent 1 or N.

use crate::error::{Result, SefcnError};
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: &[usize], data: Vec<T>) -> Result<Self> {
        validate_shape(shape)?;
        let len: usize = shape.iter().product();
        if data.len() != len {
            return Err(SefcnError::shape(format!(
                "data length {} does not match shape {:?} (product {})",
                data.len(),
                shape,
                len
            )));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn zeros(shape: &[usize]) -> Result<Self> {
        Self::filled(shape, T::zero())
    }

    pub fn filled(shape: &[usize], v: T) -> Result<Self> {
        validate_shape(shape)?;
        let len = shape.iter().product();
        Ok(Self {
            shape: shape.to_vec(),
            data: vec![v; len],
        })
    }

    /// Zero tensor with the same shape as `self`.
    pub fn zeros_like(&self) -> Self {
        Self {
            shape: self.shape.clone(),
            data: vec![T::zero(); self.data.len()],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        false // extents are positive, so there is always at least one element
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape[..] {
            [a, b] => Ok((a, b)),
            _ => Err(SefcnError::shape(format!(
                "expected rank 2, got shape {:?}",
                self.shape
            ))),
        }
    }

    pub fn dims3(&self) -> Result<(usize, usize, usize)> {
        match self.shape[..] {
            [a, b, c] => Ok((a, b, c)),
            _ => Err(SefcnError::shape(format!(
                "expected rank 3, got shape {:?}",
                self.shape
            ))),
        }
    }

    pub fn dims4(&self) -> Result<(usize, usize, usize, usize)> {
        match self.shape[..] {
            [a, b, c, d] => Ok((a, b, c, d)),
            _ => Err(SefcnError::shape(format!(
                "expected rank 4, got shape {:?}",
                self.shape
            ))),
        }
    }

    /// Same data, different shape (the element count must match).
    pub fn reshaped(&self, shape: &[usize]) -> Result<Self> {
        Self::new(shape, self.data.clone())
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Element-type conversion through `f64` (used by the 64-bit gradient
    /// checking mode).
    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| U::from_f64(v.to_f64())).collect(),
        }
    }

    /// Per-channel spatial average: `(N, C, H, W)` -> `(N, C, 1, 1)`.
    pub fn global_spatial_mean(&self) -> Result<Self> {
        let (n, c, h, w) = self.dims4()?;
        let hw = h * w;
        let norm = T::from_f64(1.0 / hw as f64);
        let mut out = vec![T::zero(); n * c];
        for i in 0..n * c {
            let s: T = self.data[i * hw..(i + 1) * hw].iter().copied().sum();
            out[i] = s * norm;
        }
        Tensor::new(&[n, c, 1, 1], out)
    }

    /// Per-channel gating: `out(n,k,i,j) = s(k) * u(n,k,i,j)`.
    ///
    /// `s` has shape `(1, C, 1, 1)` (shared across the batch) or
    /// `(N, C, 1, 1)` (one gate vector per batch item).
    pub fn scale_channels(&self, s: &Self) -> Result<Self> {
        let (n, c, h, w) = self.dims4()?;
        let (ns, cs, hs, ws) = s.dims4()?;
        if cs != c || hs != 1 || ws != 1 || (ns != 1 && ns != n) {
            return Err(SefcnError::shape(format!(
                "channel gate shape {:?} does not fit tensor shape {:?}",
                s.shape, self.shape
            )));
        }
        let hw = h * w;
        let mut out = self.data.clone();
        for ni in 0..n {
            let gate = &s.data[if ns == 1 { 0 } else { ni * c }..][..c];
            for (ci, &g) in gate.iter().enumerate() {
                let base = (ni * c + ci) * hw;
                for v in &mut out[base..base + hw] {
                    *v = *v * g;
                }
            }
        }
        Ok(Self {
            shape: self.shape.clone(),
            data: out,
        })
    }

    /// Per-pixel gating: `out(n,c,i,j) = m(i,j) * u(n,c,i,j)`.
    ///
    /// `m` has shape `(1, 1, H, W)` or `(N, 1, H, W)`.
    pub fn scale_spatial(&self, m: &Self) -> Result<Self> {
        let (n, c, h, w) = self.dims4()?;
        let (nm, cm, hm, wm) = m.dims4()?;
        if cm != 1 || hm != h || wm != w || (nm != 1 && nm != n) {
            return Err(SefcnError::shape(format!(
                "spatial gate shape {:?} does not fit tensor shape {:?}",
                m.shape, self.shape
            )));
        }
        let hw = h * w;
        let mut out = self.data.clone();
        for ni in 0..n {
            let gate = &m.data[if nm == 1 { 0 } else { ni * hw }..][..hw];
            for ci in 0..c {
                let base = (ni * c + ci) * hw;
                for (v, &g) in out[base..base + hw].iter_mut().zip(gate) {
                    *v = *v * g;
                }
            }
        }
        Ok(Self {
            shape: self.shape.clone(),
            data: out,
        })
    }

    fn zip_elementwise(&self, b: &Self, f: impl Fn(T, T) -> T) -> Result<Self> {
        if self.shape != b.shape {
            return Err(SefcnError::shape(format!(
                "elementwise op on mismatched shapes {:?} vs {:?}",
                self.shape, b.shape
            )));
        }
        Ok(Self {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&b.data)
                .map(|(&x, &y)| f(x, y))
                .collect(),
        })
    }

    pub fn add(&self, b: &Self) -> Result<Self> {
        self.zip_elementwise(b, |x, y| x + y)
    }

    pub fn mul(&self, b: &Self) -> Result<Self> {
        self.zip_elementwise(b, |x, y| x * y)
    }

    pub fn maximum(&self, b: &Self) -> Result<Self> {
        self.zip_elementwise(b, |x, y| if y > x { y } else { x })
    }

    /// Channel concatenation: `self` occupies channels `[0, C_a)`, `b` the
    /// rest. Batch and spatial extents must match.
    pub fn concat_channels(&self, b: &Self) -> Result<Self> {
        let (n, ca, h, w) = self.dims4()?;
        let (nb, cb, hb, wb) = b.dims4()?;
        if n != nb || h != hb || w != wb {
            return Err(SefcnError::shape(format!(
                "concat_channels on mismatched extents {:?} vs {:?}",
                self.shape, b.shape
            )));
        }
        let hw = h * w;
        let mut data = Vec::with_capacity(n * (ca + cb) * hw);
        for ni in 0..n {
            data.extend_from_slice(&self.data[ni * ca * hw..(ni + 1) * ca * hw]);
            data.extend_from_slice(&b.data[ni * cb * hw..(ni + 1) * cb * hw]);
        }
        Tensor::new(&[n, ca + cb, h, w], data)
    }

    /// Inverse of [`Tensor::concat_channels`]: split after channel
    /// `c_first`, returning the two parts.
    pub fn split_channels(&self, c_first: usize) -> Result<(Self, Self)> {
        let (n, c, h, w) = self.dims4()?;
        if c_first == 0 || c_first >= c {
            return Err(SefcnError::shape(format!(
                "cannot split {c} channels at {c_first}"
            )));
        }
        let hw = h * w;
        let cb = c - c_first;
        let mut da = Vec::with_capacity(n * c_first * hw);
        let mut db = Vec::with_capacity(n * cb * hw);
        for ni in 0..n {
            let base = ni * c * hw;
            da.extend_from_slice(&self.data[base..base + c_first * hw]);
            db.extend_from_slice(&self.data[base + c_first * hw..base + c * hw]);
        }
        Ok((
            Tensor::new(&[n, c_first, h, w], da)?,
            Tensor::new(&[n, cb, h, w], db)?,
        ))
    }

    pub fn iter(&self) -> std::slice::Iter<'_, T> {
        self.data.iter()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

fn validate_shape(shape: &[usize]) -> Result<()> {
    if shape.is_empty() || shape.len() > 4 {
        return Err(SefcnError::shape(format!(
            "rank must be 1..=4, got {}",
            shape.len()
        )));
    }
    if shape.iter().any(|&e| e == 0) {
        return Err(SefcnError::shape(format!(
            "extents must be positive, got {shape:?}"
        )));
    }
    Ok(())
}
