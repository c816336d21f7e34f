//! Encoder/decoder segmentation networks assembled from the layer and
//! excitation primitives. Three block families share one skeleton: `depth`
//! encoder stages joined by 2x2 max pooling, one bottleneck, `depth` decoder
//! stages joined by the family's upsampling, and a 1x1 classifier ending in
//! a channel softmax. Skip connections concatenate an encoder tap into the
//! same-resolution decoder input; excitation blocks attach at the sites the
//! position configuration selects.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SefcnError};
use crate::layers::{
    softmax_channels, BatchNorm, Conv2d, Layer, MaxPool2, MaxUnpool2, Mode, PoolIndices, Relu,
    StateItem, StateRole, TransposedConv2,
};
use crate::scalar::Scalar;
use crate::se::{SeBlock, SeConfig, SeMode};
use crate::tensor::Tensor;

#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    Unet,
    Sdnet,
    Fcdensenet,
}

/// Where excitation blocks attach: encoders (P1), decoders (P2), the
/// bottleneck (P3), the classifier input (P4), encoders and decoders (P5),
/// or all of the above (P6).
#[derive(Clone, Copy, PartialEq, Eq, Debug, Default, Serialize, Deserialize)]
pub enum Position {
    P1,
    P2,
    P3,
    P4,
    #[default]
    P5,
    P6,
}

impl Position {
    pub fn covers_encoders(self) -> bool {
        matches!(self, Position::P1 | Position::P5 | Position::P6)
    }
    pub fn covers_decoders(self) -> bool {
        matches!(self, Position::P2 | Position::P5 | Position::P6)
    }
    pub fn covers_bottleneck(self) -> bool {
        matches!(self, Position::P3 | Position::P6)
    }
    pub fn covers_classifier(self) -> bool {
        matches!(self, Position::P4 | Position::P6)
    }
}

fn default_depth() -> usize {
    4
}
fn default_channels() -> usize {
    64
}
fn default_in_channels() -> usize {
    1
}
fn default_skip_config() -> u8 {
    1
}

#[derive(Clone, PartialEq, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkSpec {
    pub family: Family,
    #[serde(default = "default_depth")]
    pub depth: usize,
    #[serde(default = "default_channels")]
    pub channels: usize,
    pub num_classes: usize,
    #[serde(default = "default_in_channels")]
    pub in_channels: usize,
    #[serde(default)]
    pub se: SeConfig,
    #[serde(default)]
    pub position: Position,
    /// Skip tap point: 1 takes the encoder output after its excitation
    /// block, 2 takes it before.
    #[serde(default = "default_skip_config")]
    pub skip_config: u8,
}

impl NetworkSpec {
    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 {
            return Err(SefcnError::config("network: depth must be at least 1"));
        }
        if self.channels == 0 {
            return Err(SefcnError::config("network: channels must be positive"));
        }
        if self.num_classes == 0 {
            return Err(SefcnError::config("network: num_classes must be positive"));
        }
        if self.in_channels == 0 {
            return Err(SefcnError::config("network: in_channels must be positive"));
        }
        if !matches!(self.skip_config, 1 | 2) {
            return Err(SefcnError::config(format!(
                "network: skip_config must be 1 or 2, got {}",
                self.skip_config
            )));
        }
        if self.se.mode != SeMode::None {
            self.se.validate(self.channels)?;
        }
        Ok(())
    }

    /// Number of excitation blocks the position configuration attaches.
    pub fn se_sites(&self) -> usize {
        if self.se.mode == SeMode::None {
            return 0;
        }
        let p = self.position;
        let mut n = 0;
        if p.covers_encoders() {
            n += self.depth;
        }
        if p.covers_decoders() {
            n += self.depth;
        }
        if p.covers_bottleneck() {
            n += 1;
        }
        if p.covers_classifier() {
            n += 1;
        }
        n
    }

    fn site_cfg(&self, covered: bool) -> SeConfig {
        if covered {
            self.se
        } else {
            SeConfig {
                mode: SeMode::None,
                ..self.se
            }
        }
    }
}

/// One layer of a plain (non-dense) block body.
enum PlainLayer<T: Scalar> {
    Conv(Conv2d<T>),
    Bn(BatchNorm<T>),
    Relu(Relu<T>),
}

/// Dense body: two same-padded convolutions whose outputs are concatenated
/// onto their inputs, then a 1x1 projection back down to the growth width.
struct DenseBlock<T: Scalar> {
    growth: usize,
    conv1: Conv2d<T>,
    conv2: Conv2d<T>,
    conv3: Conv2d<T>,
}

enum Body<T: Scalar> {
    Plain(Vec<PlainLayer<T>>),
    Dense(DenseBlock<T>),
}

impl<T: Scalar> Body<T> {
    fn build(family: Family, c_in: usize, c_out: usize, rng: &mut impl Rng) -> Result<Self> {
        Ok(match family {
            Family::Unet => Body::Plain(vec![
                PlainLayer::Conv(Conv2d::same(c_in, c_out, 3, rng)?),
                PlainLayer::Relu(Relu::new()),
                PlainLayer::Conv(Conv2d::same(c_out, c_out, 3, rng)?),
                PlainLayer::Relu(Relu::new()),
            ]),
            Family::Sdnet => Body::Plain(vec![
                PlainLayer::Conv(Conv2d::same(c_in, c_out, 7, rng)?),
                PlainLayer::Bn(BatchNorm::new(c_out)?),
                PlainLayer::Relu(Relu::new()),
            ]),
            Family::Fcdensenet => Body::Dense(DenseBlock {
                growth: c_out,
                conv1: Conv2d::same(c_in, c_out, 5, rng)?,
                conv2: Conv2d::same(c_in + c_out, c_out, 5, rng)?,
                conv3: Conv2d::new(c_in + 2 * c_out, c_out, 1, 1, 0, true, rng)?,
            }),
        })
    }

    fn forward(&mut self, input: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        match self {
            Body::Plain(layers) => {
                let mut x = input.clone();
                for layer in layers.iter_mut() {
                    x = match layer {
                        PlainLayer::Conv(l) => l.forward(&x, mode)?,
                        PlainLayer::Bn(l) => l.forward(&x, mode)?,
                        PlainLayer::Relu(l) => l.forward(&x, mode)?,
                    };
                }
                Ok(x)
            }
            Body::Dense(d) => {
                let y1 = d.conv1.forward(input, mode)?;
                let m1 = y1.concat_channels(input)?;
                let y2 = d.conv2.forward(&m1, mode)?;
                let m2 = y2.concat_channels(&m1)?;
                d.conv3.forward(&m2, mode)
            }
        }
    }

    fn backward(&mut self, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
        match self {
            Body::Plain(layers) => {
                let mut g = grad_out.clone();
                for layer in layers.iter_mut().rev() {
                    g = match layer {
                        PlainLayer::Conv(l) => l.backward(&g)?,
                        PlainLayer::Bn(l) => l.backward(&g)?,
                        PlainLayer::Relu(l) => l.backward(&g)?,
                    };
                }
                Ok(g)
            }
            Body::Dense(d) => {
                let dm2 = d.conv3.backward(grad_out)?;
                let (dy2, dm1_cat) = dm2.split_channels(d.growth)?;
                let dm1 = d.conv2.backward(&dy2)?.add(&dm1_cat)?;
                let (dy1, dx_cat) = dm1.split_channels(d.growth)?;
                d.conv1.backward(&dy1)?.add(&dx_cat)
            }
        }
    }

    fn visit_state(&mut self, prefix: &str, f: &mut dyn FnMut(StateItem<'_, T>)) {
        match self {
            Body::Plain(layers) => {
                let mut conv_n = 0;
                let mut bn_n = 0;
                for layer in layers.iter_mut() {
                    match layer {
                        PlainLayer::Conv(l) => {
                            conv_n += 1;
                            l.visit_state(&format!("{prefix}.conv{conv_n}"), f);
                        }
                        PlainLayer::Bn(l) => {
                            bn_n += 1;
                            l.visit_state(&format!("{prefix}.bn{bn_n}"), f);
                        }
                        PlainLayer::Relu(_) => {}
                    }
                }
            }
            Body::Dense(d) => {
                d.conv1.visit_state(&format!("{prefix}.conv1"), f);
                d.conv2.visit_state(&format!("{prefix}.conv2"), f);
                d.conv3.visit_state(&format!("{prefix}.conv3"), f);
            }
        }
    }
}

enum Upsample<T: Scalar> {
    TConv(TransposedConv2<T>),
    Unpool(MaxUnpool2<T>),
}

impl<T: Scalar> Upsample<T> {
    fn forward(
        &mut self,
        input: &Tensor<T>,
        indices: &PoolIndices,
        mode: Mode,
    ) -> Result<Tensor<T>> {
        match self {
            Upsample::TConv(l) => l.forward(input, mode),
            Upsample::Unpool(l) => l.forward(input, indices),
        }
    }

    fn backward(&mut self, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
        match self {
            Upsample::TConv(l) => l.backward(grad_out),
            Upsample::Unpool(l) => l.backward(grad_out),
        }
    }

    fn visit_state(&mut self, prefix: &str, f: &mut dyn FnMut(StateItem<'_, T>)) {
        if let Upsample::TConv(l) = self {
            l.visit_state(prefix, f);
        }
    }
}

struct EncoderStage<T: Scalar> {
    body: Body<T>,
    se: SeBlock<T>,
    pool: MaxPool2<T>,
}

struct CoreStage<T: Scalar> {
    body: Body<T>,
    se: SeBlock<T>,
}

struct DecoderStage<T: Scalar> {
    up: Upsample<T>,
    /// Channels the upsampling emits; the backward pass splits the
    /// concatenated gradient at this boundary.
    up_channels: usize,
    body: Body<T>,
    se: SeBlock<T>,
}

struct ClassifierStage<T: Scalar> {
    se: SeBlock<T>,
    conv: Conv2d<T>,
}

/// Per-block parameter audit.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BlockParams {
    pub name: String,
    pub total: usize,
    pub se: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamReport {
    pub total: usize,
    pub se_total: usize,
    pub per_block: Vec<BlockParams>,
}

impl ParamReport {
    /// Overhead of the excitation blocks relative to the excitation-free
    /// parameter count, in percent.
    pub fn percentage(&self) -> f64 {
        if self.total == self.se_total {
            return 0.0;
        }
        100.0 * self.se_total as f64 / (self.total - self.se_total) as f64
    }
}

pub struct Network<T: Scalar> {
    spec: NetworkSpec,
    encoders: Vec<EncoderStage<T>>,
    bottleneck: CoreStage<T>,
    decoders: Vec<DecoderStage<T>>,
    classifier: ClassifierStage<T>,
}

impl<T: Scalar> Network<T> {
    pub fn assemble(spec: &NetworkSpec, rng: &mut impl Rng) -> Result<Self> {
        spec.validate()?;
        let c = spec.channels;
        let depth = spec.depth;
        let p = spec.position;

        let mut cur = spec.in_channels;
        let mut enc_pooled = Vec::with_capacity(depth);
        let mut tap_channels = Vec::with_capacity(depth);
        let mut encoders = Vec::with_capacity(depth);
        for _ in 0..depth {
            let body = Body::build(spec.family, cur, c, rng)?;
            let cfg = spec.site_cfg(p.covers_encoders());
            let se = SeBlock::build(&cfg, c, rng)?;
            let se_out = cfg.out_channels(c);
            tap_channels.push(if spec.skip_config == 1 { se_out } else { c });
            enc_pooled.push(se_out);
            encoders.push(EncoderStage {
                body,
                se,
                pool: MaxPool2::new(),
            });
            cur = se_out;
        }

        let body = Body::build(spec.family, cur, c, rng)?;
        let cfg = spec.site_cfg(p.covers_bottleneck());
        let se = SeBlock::build(&cfg, c, rng)?;
        let bottleneck = CoreStage { body, se };
        cur = cfg.out_channels(c);

        let mut decoders = Vec::with_capacity(depth);
        for i in 0..depth {
            let e = depth - 1 - i;
            let (up, up_channels) = match spec.family {
                Family::Sdnet => {
                    if cur != enc_pooled[e] {
                        return Err(SefcnError::config(format!(
                            "network: sdnet decoder {} would unpool {cur} channels but \
                             encoder {} recorded pooling indices for {} channels; \
                             this excitation configuration does not assemble for sdnet",
                            i + 1,
                            e + 1,
                            enc_pooled[e]
                        )));
                    }
                    (Upsample::Unpool(MaxUnpool2::new()), cur)
                }
                Family::Unet | Family::Fcdensenet => (
                    Upsample::TConv(TransposedConv2::new(cur, c, true, rng)?),
                    c,
                ),
            };
            let body = Body::build(spec.family, up_channels + tap_channels[e], c, rng)?;
            let cfg = spec.site_cfg(p.covers_decoders());
            let se = SeBlock::build(&cfg, c, rng)?;
            decoders.push(DecoderStage {
                up,
                up_channels,
                body,
                se,
            });
            cur = cfg.out_channels(c);
        }

        let cfg = spec.site_cfg(p.covers_classifier());
        let se = SeBlock::build(&cfg, cur, rng)?;
        let conv = Conv2d::new(
            cfg.out_channels(cur),
            spec.num_classes,
            1,
            1,
            0,
            true,
            rng,
        )?;
        let classifier = ClassifierStage { se, conv };

        Ok(Self {
            spec: spec.clone(),
            encoders,
            bottleneck,
            decoders,
            classifier,
        })
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    fn check_input(&self, input: &Tensor<T>) -> Result<(usize, usize, usize, usize)> {
        let (n, c, h, w) = input.dims4()?;
        if c != self.spec.in_channels {
            return Err(SefcnError::input(format!(
                "network: input has {c} channels, expected {}",
                self.spec.in_channels
            )));
        }
        let div = 1usize << self.spec.depth;
        if h % div != 0 || w % div != 0 {
            return Err(SefcnError::input(format!(
                "network: spatial extent {h}x{w} is not divisible by 2^depth = {div}"
            )));
        }
        Ok((n, c, h, w))
    }

    /// Output shape for an input of the given shape, without running the
    /// network: the classifier preserves the spatial extent and emits one
    /// channel per class.
    pub fn static_output_shape(&self, input_shape: &[usize]) -> Result<Vec<usize>> {
        if input_shape.len() != 4 {
            return Err(SefcnError::shape(format!(
                "network: expected rank-4 input shape, got {input_shape:?}"
            )));
        }
        let probe = Tensor::<T>::zeros(input_shape)?;
        let (n, _, h, w) = self.check_input(&probe)?;
        Ok(vec![n, self.spec.num_classes, h, w])
    }

    /// Runs the network and returns per-pixel class probabilities.
    pub fn forward(&mut self, input: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        self.check_input(input)?;
        let depth = self.encoders.len();
        let mut taps: Vec<Tensor<T>> = Vec::with_capacity(depth);
        let mut indices: Vec<PoolIndices> = Vec::with_capacity(depth);
        let mut x = input.clone();
        let post_se_tap = self.spec.skip_config == 1;
        for enc in &mut self.encoders {
            let body_out = enc.body.forward(&x, mode)?;
            let se_out = enc.se.forward(&body_out, mode)?;
            taps.push(if post_se_tap {
                se_out.clone()
            } else {
                body_out
            });
            x = enc.pool.forward(&se_out, mode)?;
            indices.push(
                enc.pool
                    .indices()
                    .expect("pool forward just ran")
                    .clone(),
            );
        }
        let body_out = self.bottleneck.body.forward(&x, mode)?;
        x = self.bottleneck.se.forward(&body_out, mode)?;
        for (i, dec) in self.decoders.iter_mut().enumerate() {
            let e = depth - 1 - i;
            let up = dec.up.forward(&x, &indices[e], mode)?;
            let cat = up.concat_channels(&taps[e])?;
            let body_out = dec.body.forward(&cat, mode)?;
            x = dec.se.forward(&body_out, mode)?;
        }
        let se_out = self.classifier.se.forward(&x, mode)?;
        let logits = self.classifier.conv.forward(&se_out, mode)?;
        softmax_channels(&logits)
    }

    /// Backpropagates from the gradient w.r.t. the classifier's pre-softmax
    /// activations (the loss functions emit exactly that) and returns the
    /// gradient w.r.t. the network input.
    pub fn backward(&mut self, dlogits: &Tensor<T>) -> Result<Tensor<T>> {
        let depth = self.encoders.len();
        let mut g = self.classifier.conv.backward(dlogits)?;
        g = self.classifier.se.backward(&g)?;
        let mut tap_grads: Vec<Option<Tensor<T>>> = (0..depth).map(|_| None).collect();
        for (i, dec) in self.decoders.iter_mut().enumerate().rev() {
            let e = depth - 1 - i;
            g = dec.se.backward(&g)?;
            g = dec.body.backward(&g)?;
            let (d_up, d_tap) = g.split_channels(dec.up_channels)?;
            tap_grads[e] = Some(d_tap);
            g = dec.up.backward(&d_up)?;
        }
        g = self.bottleneck.se.backward(&g)?;
        g = self.bottleneck.body.backward(&g)?;
        let post_se_tap = self.spec.skip_config == 1;
        for (i, enc) in self.encoders.iter_mut().enumerate().rev() {
            let d_tap = tap_grads[i].take().expect("decoder pass filled every tap");
            let d_se_out = enc.pool.backward(&g)?;
            if post_se_tap {
                g = enc.se.backward(&d_se_out.add(&d_tap)?)?;
            } else {
                g = enc.se.backward(&d_se_out)?.add(&d_tap)?;
            }
            g = enc.body.backward(&g)?;
        }
        Ok(g)
    }

    /// Visits every state tensor (parameters and tracked buffers) in a
    /// stable order; checkpoints and the optimizer both rely on it.
    pub fn visit_state(&mut self, f: &mut dyn FnMut(StateItem<'_, T>)) {
        for (i, enc) in self.encoders.iter_mut().enumerate() {
            let prefix = format!("enc{}", i + 1);
            enc.body.visit_state(&prefix, f);
            enc.se.visit_state(&format!("{prefix}.se"), f);
        }
        self.bottleneck.body.visit_state("bottleneck", f);
        self.bottleneck.se.visit_state("bottleneck.se", f);
        for (i, dec) in self.decoders.iter_mut().enumerate() {
            let prefix = format!("dec{}", i + 1);
            dec.up.visit_state(&format!("{prefix}.up"), f);
            dec.body.visit_state(&prefix, f);
            dec.se.visit_state(&format!("{prefix}.se"), f);
        }
        self.classifier.se.visit_state("classifier.se", f);
        self.classifier.conv.visit_state("classifier.conv", f);
    }

    pub fn zero_grads(&mut self) {
        self.visit_state(&mut |item| {
            if let Some(grad) = item.grad {
                grad.data_mut().fill(T::zero());
            }
        });
    }

    /// All state tensors (parameters and buffers) in visit order, converted
    /// to f32 for serialization.
    pub fn state_tensors(&mut self) -> Vec<Tensor<f32>> {
        let mut out = Vec::new();
        self.visit_state(&mut |item| out.push(item.value.cast::<f32>()));
        out
    }

    /// Installs state tensors produced by `state_tensors` (possibly from a
    /// different precision); errors name the first mismatched tensor.
    pub fn load_state(&mut self, tensors: &[Tensor<f32>]) -> Result<()> {
        let mut names = Vec::new();
        self.visit_state(&mut |item| names.push(item.name));
        if tensors.len() != names.len() {
            return Err(SefcnError::config(format!(
                "checkpoint holds {} tensors but the network has {} state tensors",
                tensors.len(),
                names.len()
            )));
        }
        let mut idx = 0;
        let mut err: Option<SefcnError> = None;
        self.visit_state(&mut |item| {
            if err.is_some() {
                return;
            }
            let t = &tensors[idx];
            if t.shape() != item.value.shape() {
                err = Some(SefcnError::config(format!(
                    "checkpoint tensor {idx} ({}) has shape {:?}, network expects {:?}",
                    item.name,
                    t.shape(),
                    item.value.shape()
                )));
            } else {
                *item.value = t.cast::<T>();
            }
            idx += 1;
        });
        match err {
            Some(e) => Err(e),
            None => Ok(()),
        }
    }

    pub fn count_parameters(&mut self) -> ParamReport {
        let mut per_block: Vec<BlockParams> = Vec::new();
        let mut total = 0;
        let mut se_total = 0;
        self.visit_state(&mut |item| {
            if item.role != StateRole::Param {
                return;
            }
            let n = item.value.len();
            let block = item.name.split('.').next().unwrap_or("").to_string();
            let is_se = item.name.split('.').nth(1) == Some("se");
            total += n;
            if is_se {
                se_total += n;
            }
            match per_block.last_mut() {
                Some(b) if b.name == block => {
                    b.total += n;
                    if is_se {
                        b.se += n;
                    }
                }
                _ => per_block.push(BlockParams {
                    name: block,
                    total: n,
                    se: if is_se { n } else { 0 },
                }),
            }
        });
        ParamReport {
            total,
            se_total,
            per_block,
        }
    }

    fn se_block(&self, site: &str) -> Result<&SeBlock<T>> {
        let depth = self.encoders.len();
        let stage = |list: &'static str, idx: &str| -> Result<usize> {
            let i: usize = idx.parse().map_err(|_| {
                SefcnError::config(format!("unknown excitation site '{list}-{idx}'"))
            })?;
            if i == 0 || i > depth {
                return Err(SefcnError::config(format!(
                    "excitation site '{list}-{i}' is out of range; depth is {depth}"
                )));
            }
            Ok(i - 1)
        };
        if let Some(idx) = site.strip_prefix("sE-") {
            return Ok(&self.encoders[stage("sE", idx)?].se);
        }
        if let Some(idx) = site.strip_prefix("sD-") {
            return Ok(&self.decoders[stage("sD", idx)?].se);
        }
        match site {
            "sB" => Ok(&self.bottleneck.se),
            "sC" => Ok(&self.classifier.se),
            _ => Err(SefcnError::config(format!(
                "unknown excitation site '{site}'; valid sites are sE-1..sE-{depth}, sB, sD-1..sD-{depth}, sC"
            ))),
        }
    }

    /// Post-sigmoid spatial gate recorded at the given site by the most
    /// recent forward pass. Errors if the site has no spatial excitation
    /// branch or no forward pass has run.
    pub fn spatial_gate(&self, site: &str) -> Result<&Tensor<T>> {
        let block = self.se_block(site)?;
        if block.is_none() {
            return Err(SefcnError::config(format!(
                "site '{site}' has no excitation block under position {:?}",
                self.spec.position
            )));
        }
        match block.spatial_gate() {
            Some(g) => Ok(g),
            None => match block {
                SeBlock::Cse(_) => Err(SefcnError::config(format!(
                    "site '{site}' uses channel excitation only; no spatial gate exists"
                ))),
                _ => Err(SefcnError::input(format!(
                    "site '{site}' has not recorded a gate yet; run a forward pass first"
                ))),
            },
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::se::Aggregation;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(11)
    }

    fn spec(family: Family, mode: SeMode) -> NetworkSpec {
        NetworkSpec {
            family,
            depth: 4,
            channels: 64,
            num_classes: 9,
            in_channels: 1,
            se: SeConfig {
                mode,
                r: 2,
                aggregation: Aggregation::Maxout,
            },
            position: Position::P5,
            skip_config: 1,
        }
    }

    fn total(family: Family, mode: SeMode) -> usize {
        let mut net = Network::<f32>::assemble(&spec(family, mode), &mut rng()).unwrap();
        net.count_parameters().total
    }

    // Closed-form parameter arithmetic, spelled out independently of the
    // builder: conv = out*in*k*k + out, bn = 2*c, tconv = in*out*4 + out.
    fn conv(oc: usize, ic: usize, k: usize) -> usize {
        oc * ic * k * k + oc
    }

    #[test]
    fn unet_parameter_count_matches_arithmetic() {
        let block = |ic: usize| conv(64, ic, 3) + conv(64, 64, 3);
        let tconv = 64 * 64 * 4 + 64;
        let expected = block(1)
            + 3 * block(64)      // encoders 2..4
            + block(64)          // bottleneck
            + 4 * (tconv + block(128))
            + conv(9, 64, 1); // classifier
        assert_eq!(expected, 842_249);
        assert_eq!(total(Family::Unet, SeMode::None), expected);
    }

    #[test]
    fn sdnet_parameter_count_matches_arithmetic() {
        let block = |ic: usize| conv(64, ic, 7) + 2 * 64;
        let expected = block(1) + 3 * block(64) + block(64) + 4 * block(128) + conv(9, 64, 1);
        assert_eq!(expected, 2_413_897);
        assert_eq!(total(Family::Sdnet, SeMode::None), expected);
    }

    #[test]
    fn fcdensenet_parameter_count_matches_arithmetic() {
        let block =
            |ic: usize| conv(64, ic, 5) + conv(64, ic + 64, 5) + conv(64, ic + 128, 1);
        let tconv = 64 * 64 * 4 + 64;
        let expected =
            block(1) + 3 * block(64) + block(64) + 4 * (tconv + block(128)) + conv(9, 64, 1);
        assert_eq!(expected, 3_573_449);
        assert_eq!(total(Family::Fcdensenet, SeMode::None), expected);
    }

    #[test]
    fn se_additions_are_family_independent() {
        for family in [Family::Unet, Family::Sdnet, Family::Fcdensenet] {
            let base = total(family, SeMode::None);
            assert_eq!(total(family, SeMode::Cse) - base, 32_768);
            assert_eq!(total(family, SeMode::Sse) - base, 512);
            assert_eq!(total(family, SeMode::Scse) - base, 33_280);
        }
    }

    #[test]
    fn se_total_is_reported_separately() {
        let mut net = Network::<f32>::assemble(&spec(Family::Unet, SeMode::Scse), &mut rng())
            .unwrap();
        let report = net.count_parameters();
        assert_eq!(report.se_total, 33_280);
        assert_eq!(report.total - report.se_total, 842_249);
        let enc1 = &report.per_block[0];
        assert_eq!(enc1.name, "enc1");
        assert_eq!(enc1.se, 4160);
    }

    #[test]
    fn site_counts_per_position() {
        let mut s = spec(Family::Unet, SeMode::Scse);
        s.position = Position::P5;
        assert_eq!(s.se_sites(), 8);
        s.position = Position::P6;
        assert_eq!(s.se_sites(), 10);
        s.position = Position::P3;
        assert_eq!(s.se_sites(), 1);
        s.se.mode = SeMode::None;
        assert_eq!(s.se_sites(), 0);
    }

    #[test]
    fn forward_emits_per_pixel_distributions() {
        for family in [Family::Unet, Family::Sdnet, Family::Fcdensenet] {
            let mut s = spec(family, SeMode::Scse);
            s.channels = 8;
            s.num_classes = 3;
            s.depth = 2;
            let mut net = Network::<f32>::assemble(&s, &mut rng()).unwrap();
            let x = Tensor::filled(&[2, 1, 8, 12], 0.3).unwrap();
            let y = net.forward(&x, Mode::Train).unwrap();
            assert_eq!(y.shape(), &[2, 3, 8, 12]);
            assert_eq!(
                net.static_output_shape(&[2, 1, 8, 12]).unwrap(),
                vec![2, 3, 8, 12]
            );
            for n in 0..2 {
                for pix in 0..96 {
                    let sum: f32 = (0..3).map(|c| y.data()[(n * 3 + c) * 96 + pix]).sum();
                    assert!((sum - 1.0).abs() < 1e-5);
                }
            }
        }
    }

    #[test]
    fn indivisible_extent_fails_at_forward() {
        let s = spec(Family::Unet, SeMode::None);
        let mut net = Network::<f32>::assemble(&s, &mut rng()).unwrap();
        let x = Tensor::zeros(&[1, 1, 60, 64]).unwrap();
        let err = net.forward(&x, Mode::Eval).unwrap_err();
        assert!(err.to_string().contains("not divisible"));
    }

    #[test]
    fn sdnet_rejects_unpoolable_channel_widening() {
        let mut s = spec(Family::Sdnet, SeMode::Scse);
        s.se.aggregation = Aggregation::Concatenation;
        // wherever the doubling is one-sided, some decoder would feed the
        // paired unpool a different width than its recorded indices
        for pos in [Position::P1, Position::P2, Position::P3, Position::P5] {
            s.position = pos;
            let err = Network::<f32>::assemble(&s, &mut rng()).err().unwrap();
            assert!(err.to_string().contains("unpool"), "{pos:?}: {err}");
        }
        // the classifier site never touches the unpooling path, and full
        // coverage doubles both sides of every pairing uniformly
        for pos in [Position::P4, Position::P6] {
            s.position = pos;
            let mut net = Network::<f32>::assemble(&s, &mut rng()).unwrap();
            let x = Tensor::filled(&[1, 1, 32, 32], 0.1f32).unwrap();
            let y = net.forward(&x, Mode::Train).unwrap();
            assert_eq!(y.shape(), &[1, 9, 32, 32], "{pos:?}");
        }
    }

    #[test]
    fn concatenation_widens_downstream_counts() {
        let mut s = spec(Family::Unet, SeMode::Scse);
        s.se.aggregation = Aggregation::Concatenation;
        let mut net = Network::<f32>::assemble(&s, &mut rng()).unwrap();
        let widened = net.count_parameters();
        s.se.aggregation = Aggregation::Maxout;
        let mut net = Network::<f32>::assemble(&s, &mut rng()).unwrap();
        let boxed = net.count_parameters();
        assert!(widened.total > boxed.total);
        // both still reshape to the same output
        let x = Tensor::filled(&[1, 1, 16, 16], 0.1).unwrap();
        s.se.aggregation = Aggregation::Concatenation;
        let mut net = Network::<f32>::assemble(&s, &mut rng()).unwrap();
        let y = net.forward(&x, Mode::Train).unwrap();
        assert_eq!(y.shape(), &[1, 9, 16, 16]);
    }

    #[test]
    fn skip_configs_share_counts_and_shapes() {
        for family in [Family::Unet, Family::Sdnet, Family::Fcdensenet] {
            let mut s = spec(family, SeMode::Scse);
            s.channels = 8;
            s.depth = 2;
            s.num_classes = 3;
            s.skip_config = 1;
            let mut n1 = Network::<f32>::assemble(&s, &mut rng()).unwrap();
            s.skip_config = 2;
            let mut n2 = Network::<f32>::assemble(&s, &mut rng()).unwrap();
            assert_eq!(n1.count_parameters(), n2.count_parameters());
            let x = Tensor::filled(&[1, 1, 8, 8], 0.5).unwrap();
            assert_eq!(
                n1.forward(&x, Mode::Train).unwrap().shape(),
                n2.forward(&x, Mode::Train).unwrap().shape()
            );
        }
    }

    #[test]
    fn state_roundtrip_and_mismatch_naming() {
        let mut s = spec(Family::Unet, SeMode::Sse);
        s.channels = 8;
        s.depth = 2;
        s.num_classes = 3;
        let mut net = Network::<f32>::assemble(&s, &mut rng()).unwrap();
        let saved = net.state_tensors();
        let mut other = Network::<f32>::assemble(&s, &mut rng()).unwrap();
        other.load_state(&saved).unwrap();
        assert_eq!(other.state_tensors(), saved);

        // count mismatch
        let err = other.load_state(&saved[1..]).unwrap_err();
        assert!(err.to_string().contains("state tensors"));

        // shape mismatch names the offender
        let mut wide = s.clone();
        wide.channels = 16;
        let mut bigger = Network::<f32>::assemble(&wide, &mut rng()).unwrap();
        let err = bigger.load_state(&saved).unwrap_err();
        assert!(err.to_string().contains("enc1.conv1.weight"), "{err}");
    }

    #[test]
    fn visit_order_is_stable_and_named() {
        let mut s = spec(Family::Sdnet, SeMode::Scse);
        s.channels = 8;
        s.depth = 1;
        s.num_classes = 2;
        s.position = Position::P6;
        let mut net = Network::<f32>::assemble(&s, &mut rng()).unwrap();
        let mut names = Vec::new();
        net.visit_state(&mut |item| names.push(item.name));
        let expected = [
            "enc1.conv1.weight",
            "enc1.conv1.bias",
            "enc1.bn1.gamma",
            "enc1.bn1.beta",
            "enc1.bn1.running_mean",
            "enc1.bn1.running_var",
            "enc1.se.cse.reduce.weight",
            "enc1.se.cse.expand.weight",
            "enc1.se.sse.weight",
            "bottleneck.conv1.weight",
            "bottleneck.conv1.bias",
            "bottleneck.bn1.gamma",
            "bottleneck.bn1.beta",
            "bottleneck.bn1.running_mean",
            "bottleneck.bn1.running_var",
            "bottleneck.se.cse.reduce.weight",
            "bottleneck.se.cse.expand.weight",
            "bottleneck.se.sse.weight",
            "dec1.conv1.weight",
            "dec1.conv1.bias",
            "dec1.bn1.gamma",
            "dec1.bn1.beta",
            "dec1.bn1.running_mean",
            "dec1.bn1.running_var",
            "dec1.se.cse.reduce.weight",
            "dec1.se.cse.expand.weight",
            "dec1.se.sse.weight",
            "classifier.se.cse.reduce.weight",
            "classifier.se.cse.expand.weight",
            "classifier.se.sse.weight",
            "classifier.conv.weight",
            "classifier.conv.bias",
        ];
        assert_eq!(names, expected);
    }

    #[test]
    fn spatial_gate_lookup() {
        let mut s = spec(Family::Unet, SeMode::Scse);
        s.channels = 8;
        s.depth = 2;
        s.num_classes = 3;
        let mut net = Network::<f32>::assemble(&s, &mut rng()).unwrap();
        // before any forward pass
        assert!(net.spatial_gate("sE-1").is_err());
        let x = Tensor::filled(&[1, 1, 8, 8], 0.2).unwrap();
        net.forward(&x, Mode::Eval).unwrap();
        let gate = net.spatial_gate("sE-1").unwrap();
        assert_eq!(gate.shape(), &[1, 1, 8, 8]);
        assert_eq!(net.spatial_gate("sD-2").unwrap().shape(), &[1, 1, 8, 8]);
        // bottleneck not covered under P5
        assert!(net.spatial_gate("sB").is_err());
        // unknown site
        assert!(net.spatial_gate("sX-1").is_err());
        assert!(net.spatial_gate("sE-9").is_err());
    }

    #[test]
    fn spec_defaults_from_toml() {
        let s: NetworkSpec =
            toml::from_str("family = \"unet\"\nnum_classes = 9").unwrap();
        assert_eq!(s.depth, 4);
        assert_eq!(s.channels, 64);
        assert_eq!(s.in_channels, 1);
        assert_eq!(s.position, Position::P5);
        assert_eq!(s.skip_config, 1);
        assert_eq!(s.se.mode, SeMode::None);
        assert!(s.validate().is_ok());
        let s: std::result::Result<NetworkSpec, _> =
            toml::from_str("family = \"unet\"\nnum_classes = 9\nbogus = 1");
        assert!(s.is_err());
    }
}
