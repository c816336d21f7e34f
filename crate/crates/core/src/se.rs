//! Squeeze-and-excitation blocks: recalibration modules that rescale a
//! feature map by learned gates. The channel variant (`cse`) squeezes the
//! spatial extent into a per-channel descriptor and excites each channel;
//! the spatial variant (`sse`) squeezes channels into a per-position
//! descriptor and excites each position; the concurrent variant (`scse`)
//! runs both on the same input and combines their outputs.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SefcnError};
use crate::layers::{init_uniform, missing_forward, xavier_bound};
use crate::layers::{FullyConnected, Layer, Mode, Relu, Sigmoid, StateItem, StateRole};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, PartialEq, Eq, Debug, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SeMode {
    #[default]
    None,
    Cse,
    Sse,
    Scse,
}

/// How the two branch outputs of a concurrent block are combined.
#[derive(Clone, Copy, PartialEq, Eq, Debug, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Aggregation {
    #[default]
    Maxout,
    Addition,
    Multiplication,
    Concatenation,
}

#[derive(Clone, Copy, PartialEq, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SeConfig {
    #[serde(default)]
    pub mode: SeMode,
    #[serde(default = "default_r")]
    pub r: usize,
    #[serde(default)]
    pub aggregation: Aggregation,
}

fn default_r() -> usize {
    2
}

impl Default for SeConfig {
    fn default() -> Self {
        Self {
            mode: SeMode::None,
            r: default_r(),
            aggregation: Aggregation::Maxout,
        }
    }
}

impl SeConfig {
    pub fn validate(&self, channels: usize) -> Result<()> {
        if self.r == 0 {
            return Err(SefcnError::config("se: reduction ratio r must be positive"));
        }
        if matches!(self.mode, SeMode::Cse | SeMode::Scse) && channels / self.r == 0 {
            return Err(SefcnError::config(format!(
                "se: reduction ratio {} exceeds channel count {channels}",
                self.r
            )));
        }
        Ok(())
    }

    /// Channels a block built from this config emits for an input with
    /// `channels`. Only concatenation widens the map.
    pub fn out_channels(&self, channels: usize) -> usize {
        match (self.mode, self.aggregation) {
            (SeMode::Scse, Aggregation::Concatenation) => channels * 2,
            _ => channels,
        }
    }
}

/// Trainable weights a block adds at the given channel width: the channel
/// branch owns the two projection matrices, the spatial branch one weight
/// per channel, and everything is bias-free.
pub fn se_param_count(cfg: &SeConfig, channels: usize) -> usize {
    match cfg.mode {
        SeMode::None => 0,
        SeMode::Cse => 2 * channels * (channels / cfg.r),
        SeMode::Sse => channels,
        SeMode::Scse => 2 * channels * (channels / cfg.r) + channels,
    }
}

/// Channel excitation: mean over the spatial extent, a bottleneck pair of
/// bias-free projections (reduce by r, expand back) with a rectifier between
/// and a sigmoid after, then per-channel rescaling of the input.
pub struct CseBlock<T: Scalar> {
    channels: usize,
    reduce: FullyConnected<T>,
    expand: FullyConnected<T>,
    relu: Relu<T>,
    sigmoid: Sigmoid<T>,
    cache: Option<(Tensor<T>, Tensor<T>)>,
}

impl<T: Scalar> CseBlock<T> {
    pub fn new(channels: usize, r: usize, rng: &mut impl Rng) -> Result<Self> {
        let hidden = channels / r;
        if hidden == 0 {
            return Err(SefcnError::config(format!(
                "cse: reduction ratio {r} exceeds channel count {channels}"
            )));
        }
        Ok(Self {
            channels,
            reduce: FullyConnected::new(channels, hidden, rng)?,
            expand: FullyConnected::new(hidden, channels, rng)?,
            relu: Relu::new(),
            sigmoid: Sigmoid::new(),
            cache: None,
        })
    }

    #[cfg(test)]
    fn weights_mut(&mut self) -> (&mut Tensor<T>, &mut Tensor<T>) {
        (self.reduce.weight_mut(), self.expand.weight_mut())
    }
}

impl<T: Scalar> Layer<T> for CseBlock<T> {
    fn forward(&mut self, input: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let (n, c, _, _) = input.dims4()?;
        if c != self.channels {
            return Err(SefcnError::shape(format!(
                "cse: input has {c} channels, block expects {}",
                self.channels
            )));
        }
        let mean = input.global_spatial_mean()?.reshaped(&[n, c])?;
        let hidden = self.relu.forward(&self.reduce.forward(&mean, mode)?, mode)?;
        let gate = self
            .sigmoid
            .forward(&self.expand.forward(&hidden, mode)?, mode)?;
        let out = input.scale_channels(&gate.reshaped(&[n, c, 1, 1])?)?;
        self.cache = Some((input.clone(), gate));
        Ok(out)
    }

    fn backward(&mut self, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
        let (input, gate) = self.cache.take().ok_or_else(|| missing_forward("cse"))?;
        let (n, c, h, w) = input.dims4()?;
        if grad_out.shape() != input.shape() {
            return Err(SefcnError::shape(format!(
                "cse: gradient shape {:?} does not match input {:?}",
                grad_out.shape(),
                input.shape()
            )));
        }
        let hw = h * w;
        // Gate gradient collects the spatial extent of grad*input per channel.
        let mut dgate = Tensor::zeros(&[n, c])?;
        for ni in 0..n {
            for ci in 0..c {
                let base = (ni * c + ci) * hw;
                let mut s = T::zero();
                for i in base..base + hw {
                    s = s + grad_out.data()[i] * input.data()[i];
                }
                dgate.data_mut()[ni * c + ci] = s;
            }
        }
        let dexpand = self.sigmoid.backward(&dgate)?;
        let dhidden = self.expand.backward(&dexpand)?;
        let dreduce = self.relu.backward(&dhidden)?;
        let dmean = self.reduce.backward(&dreduce)?;

        // Input receives the direct rescaling path plus the squeeze path
        // (the mean spreads its gradient uniformly over the extent).
        let mut din = grad_out.scale_channels(&gate.reshaped(&[n, c, 1, 1])?)?;
        let inv_hw = T::from_f64(1.0 / hw as f64);
        for ni in 0..n {
            for ci in 0..c {
                let spread = dmean.data()[ni * c + ci] * inv_hw;
                let base = (ni * c + ci) * hw;
                for v in &mut din.data_mut()[base..base + hw] {
                    *v = *v + spread;
                }
            }
        }
        Ok(din)
    }

    fn visit_state(&mut self, prefix: &str, f: &mut dyn FnMut(StateItem<'_, T>)) {
        self.reduce.visit_state(&format!("{prefix}.reduce"), f);
        self.expand.visit_state(&format!("{prefix}.expand"), f);
    }
}

/// Spatial excitation: a bias-free per-channel projection to one map,
/// squashed by a sigmoid and used to rescale every channel position-wise.
pub struct SseBlock<T: Scalar> {
    channels: usize,
    weight: Tensor<T>,
    grad_weight: Tensor<T>,
    last_gate: Option<Tensor<T>>,
    cache: Option<(Tensor<T>, Tensor<T>)>,
}

impl<T: Scalar> SseBlock<T> {
    pub fn new(channels: usize, rng: &mut impl Rng) -> Result<Self> {
        let bound = xavier_bound(channels, 1);
        Ok(Self {
            channels,
            weight: init_uniform(&[channels], bound, rng)?,
            grad_weight: Tensor::zeros(&[channels])?,
            last_gate: None,
            cache: None,
        })
    }

    pub fn weight_mut(&mut self) -> &mut Tensor<T> {
        &mut self.weight
    }

    /// Gate map (N,1,H,W) from the most recent forward pass.
    pub fn last_gate(&self) -> Option<&Tensor<T>> {
        self.last_gate.as_ref()
    }
}

impl<T: Scalar> Layer<T> for SseBlock<T> {
    fn forward(&mut self, input: &Tensor<T>, _mode: Mode) -> Result<Tensor<T>> {
        let (n, c, h, w) = input.dims4()?;
        if c != self.channels {
            return Err(SefcnError::shape(format!(
                "sse: input has {c} channels, block expects {}",
                self.channels
            )));
        }
        let hw = h * w;
        let mut gate: Tensor<T> = Tensor::zeros(&[n, 1, h, w])?;
        for ni in 0..n {
            for ci in 0..c {
                let wc = self.weight.data()[ci];
                let base = (ni * c + ci) * hw;
                let gbase = ni * hw;
                for i in 0..hw {
                    gate.data_mut()[gbase + i] =
                        gate.data()[gbase + i] + wc * input.data()[base + i];
                }
            }
        }
        for v in gate.data_mut() {
            *v = T::one() / (T::one() + (-*v).exp());
        }
        let out = input.scale_spatial(&gate)?;
        self.last_gate = Some(gate.clone());
        self.cache = Some((input.clone(), gate));
        Ok(out)
    }

    fn backward(&mut self, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
        let (input, gate) = self.cache.take().ok_or_else(|| missing_forward("sse"))?;
        let (n, c, h, w) = input.dims4()?;
        if grad_out.shape() != input.shape() {
            return Err(SefcnError::shape(format!(
                "sse: gradient shape {:?} does not match input {:?}",
                grad_out.shape(),
                input.shape()
            )));
        }
        let hw = h * w;
        // dgate accumulates grad*input over channels, then passes through
        // the sigmoid derivative to reach the projection output.
        let mut dlogit: Tensor<T> = Tensor::zeros(&[n, 1, h, w])?;
        for ni in 0..n {
            let gbase = ni * hw;
            for ci in 0..c {
                let base = (ni * c + ci) * hw;
                for i in 0..hw {
                    dlogit.data_mut()[gbase + i] = dlogit.data()[gbase + i]
                        + grad_out.data()[base + i] * input.data()[base + i];
                }
            }
            for i in 0..hw {
                let q = gate.data()[gbase + i];
                dlogit.data_mut()[gbase + i] =
                    dlogit.data()[gbase + i] * q * (T::one() - q);
            }
        }
        let mut din = grad_out.scale_spatial(&gate)?;
        for ni in 0..n {
            let gbase = ni * hw;
            for ci in 0..c {
                let base = (ni * c + ci) * hw;
                let mut dw = T::zero();
                let wc = self.weight.data()[ci];
                for i in 0..hw {
                    let dl = dlogit.data()[gbase + i];
                    dw = dw + dl * input.data()[base + i];
                    din.data_mut()[base + i] = din.data()[base + i] + dl * wc;
                }
                self.grad_weight.data_mut()[ci] = self.grad_weight.data()[ci] + dw;
            }
        }
        Ok(din)
    }

    fn visit_state(&mut self, prefix: &str, f: &mut dyn FnMut(StateItem<'_, T>)) {
        f(StateItem {
            name: format!("{prefix}.weight"),
            kind: "sse",
            role: StateRole::Param,
            value: &mut self.weight,
            grad: Some(&mut self.grad_weight),
        });
    }
}

/// Concurrent excitation: both branches run on the same input and their
/// outputs are combined by the configured aggregation. Maxout ties go to
/// the channel branch.
pub struct ScseBlock<T: Scalar> {
    cse: CseBlock<T>,
    sse: SseBlock<T>,
    aggregation: Aggregation,
    cache: Option<(Tensor<T>, Tensor<T>)>,
}

impl<T: Scalar> ScseBlock<T> {
    pub fn new(
        channels: usize,
        r: usize,
        aggregation: Aggregation,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Ok(Self {
            cse: CseBlock::new(channels, r, rng)?,
            sse: SseBlock::new(channels, rng)?,
            aggregation,
            cache: None,
        })
    }
}

impl<T: Scalar> Layer<T> for ScseBlock<T> {
    fn forward(&mut self, input: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let a = self.cse.forward(input, mode)?;
        let b = self.sse.forward(input, mode)?;
        let out = match self.aggregation {
            Aggregation::Maxout => a.maximum(&b)?,
            Aggregation::Addition => a.add(&b)?,
            Aggregation::Multiplication => a.mul(&b)?,
            Aggregation::Concatenation => a.concat_channels(&b)?,
        };
        self.cache = Some((a, b));
        Ok(out)
    }

    fn backward(&mut self, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
        let (a, b) = self.cache.take().ok_or_else(|| missing_forward("scse"))?;
        let (da, db) = match self.aggregation {
            Aggregation::Maxout => {
                // Ties route to the channel branch, matching forward.
                let mut da = grad_out.clone();
                let mut db = grad_out.clone();
                for i in 0..a.len() {
                    if a.data()[i] >= b.data()[i] {
                        db.data_mut()[i] = T::zero();
                    } else {
                        da.data_mut()[i] = T::zero();
                    }
                }
                (da, db)
            }
            Aggregation::Addition => (grad_out.clone(), grad_out.clone()),
            Aggregation::Multiplication => (grad_out.mul(&b)?, grad_out.mul(&a)?),
            Aggregation::Concatenation => {
                let c = a.shape()[1];
                grad_out.split_channels(c)?
            }
        };
        let din_a = self.cse.backward(&da)?;
        let din_b = self.sse.backward(&db)?;
        din_a.add(&din_b)
    }

    fn visit_state(&mut self, prefix: &str, f: &mut dyn FnMut(StateItem<'_, T>)) {
        self.cse.visit_state(&format!("{prefix}.cse"), f);
        self.sse.visit_state(&format!("{prefix}.sse"), f);
    }
}

/// A recalibration site in a network: either absent or one of the three
/// block variants.
pub enum SeBlock<T: Scalar> {
    None,
    Cse(CseBlock<T>),
    Sse(SseBlock<T>),
    Scse(ScseBlock<T>),
}

impl<T: Scalar> SeBlock<T> {
    pub fn build(cfg: &SeConfig, channels: usize, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate(channels)?;
        Ok(match cfg.mode {
            SeMode::None => SeBlock::None,
            SeMode::Cse => SeBlock::Cse(CseBlock::new(channels, cfg.r, rng)?),
            SeMode::Sse => SeBlock::Sse(SseBlock::new(channels, rng)?),
            SeMode::Scse => SeBlock::Scse(ScseBlock::new(
                channels,
                cfg.r,
                cfg.aggregation,
                rng,
            )?),
        })
    }

    /// Post-sigmoid spatial gate map from the most recent forward pass, if
    /// this block has a spatial branch.
    pub fn spatial_gate(&self) -> Option<&Tensor<T>> {
        match self {
            SeBlock::Sse(b) => b.last_gate(),
            SeBlock::Scse(b) => b.sse.last_gate(),
            _ => None,
        }
    }

    pub fn is_none(&self) -> bool {
        matches!(self, SeBlock::None)
    }
}

impl<T: Scalar> Layer<T> for SeBlock<T> {
    fn forward(&mut self, input: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        match self {
            SeBlock::None => Ok(input.clone()),
            SeBlock::Cse(b) => b.forward(input, mode),
            SeBlock::Sse(b) => b.forward(input, mode),
            SeBlock::Scse(b) => b.forward(input, mode),
        }
    }

    fn backward(&mut self, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
        match self {
            SeBlock::None => Ok(grad_out.clone()),
            SeBlock::Cse(b) => b.backward(grad_out),
            SeBlock::Sse(b) => b.backward(grad_out),
            SeBlock::Scse(b) => b.backward(grad_out),
        }
    }

    fn visit_state(&mut self, prefix: &str, f: &mut dyn FnMut(StateItem<'_, T>)) {
        match self {
            SeBlock::None => {}
            SeBlock::Cse(b) => b.visit_state(prefix, f),
            SeBlock::Sse(b) => b.visit_state(prefix, f),
            SeBlock::Scse(b) => b.visit_state(prefix, f),
        }
    }
}
