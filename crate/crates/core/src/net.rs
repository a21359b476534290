//! Small differentiable convolutional networks: the two encoders, the shared
//! latent decoder, and the fusion segmenter are all built from one vocabulary
//! of 3×3 convolutions and pointwise nonlinearities.
//!
//! Everything runs on the CPU in f64. Forward caches per-layer inputs;
//! backward replays the chain rule and returns a flat parameter-gradient
//! vector aligned with [`ConvNet::parameters`]. Gradients are verified
//! against central finite differences in the tests.

use std::path::Path;

use crate::error::{Error, Result};
use crate::image::MultiChannelField;
use crate::rng::Pcg32;

/// One 3×3 convolution with zero padding, so spatial dimensions are
/// preserved (full-resolution latents fall out of this).
///
/// Weights are stored `[out][in][row][col]`, biases `[out]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv3x3 {
    in_channels: usize,
    out_channels: usize,
    weights: Vec<f64>,
    bias: Vec<f64>,
}

impl Conv3x3 {
    pub fn zeros(in_channels: usize, out_channels: usize) -> Result<Self> {
        if in_channels == 0 || out_channels == 0 {
            return Err(Error::InvalidParam(
                "convolution needs at least one input and one output channel".into(),
            ));
        }
        Ok(Self {
            in_channels,
            out_channels,
            weights: vec![0.0; out_channels * in_channels * 9],
            bias: vec![0.0; out_channels],
        })
    }

    /// Uniform init in [−a, a], a = 1/√(fan-in) with fan-in = 9·in_channels.
    pub fn seeded(in_channels: usize, out_channels: usize, rng: &mut Pcg32) -> Result<Self> {
        let mut conv = Self::zeros(in_channels, out_channels)?;
        let a = 1.0 / ((9 * in_channels) as f64).sqrt();
        for w in &mut conv.weights {
            *w = rng.next_range(-a, a);
        }
        for b in &mut conv.bias {
            *b = rng.next_range(-a, a);
        }
        Ok(conv)
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    pub fn out_channels(&self) -> usize {
        self.out_channels
    }

    pub fn parameter_count(&self) -> usize {
        self.weights.len() + self.bias.len()
    }

    fn weight(&self, o: usize, c: usize, di: usize, dj: usize) -> f64 {
        self.weights[((o * self.in_channels + c) * 3 + di) * 3 + dj]
    }

    fn forward(&self, x: &MultiChannelField) -> MultiChannelField {
        let (h, w) = (x.height(), x.width());
        let mut out = MultiChannelField::zeros(self.out_channels, h, w);
        for o in 0..self.out_channels {
            for i in 0..h {
                for j in 0..w {
                    let mut acc = self.bias[o];
                    for c in 0..self.in_channels {
                        for di in 0..3 {
                            let ii = i + di;
                            if ii == 0 || ii > h {
                                continue; // zero padding above/below
                            }
                            for dj in 0..3 {
                                let jj = j + dj;
                                if jj == 0 || jj > w {
                                    continue;
                                }
                                acc += self.weight(o, c, di, dj) * x[(c, ii - 1, jj - 1)];
                            }
                        }
                    }
                    out[(o, i, j)] = acc;
                }
            }
        }
        out
    }

    /// Scatters into weight/bias gradients and the input gradient with the
    /// same loop order as `forward`, so accumulation order is deterministic.
    fn backward(
        &self,
        x: &MultiChannelField,
        upstream: &MultiChannelField,
        grad_w: &mut [f64],
        grad_b: &mut [f64],
    ) -> MultiChannelField {
        let (h, w) = (x.height(), x.width());
        let mut grad_x = MultiChannelField::zeros(self.in_channels, h, w);
        for o in 0..self.out_channels {
            for i in 0..h {
                for j in 0..w {
                    let g = upstream[(o, i, j)];
                    grad_b[o] += g;
                    for c in 0..self.in_channels {
                        for di in 0..3 {
                            let ii = i + di;
                            if ii == 0 || ii > h {
                                continue;
                            }
                            for dj in 0..3 {
                                let jj = j + dj;
                                if jj == 0 || jj > w {
                                    continue;
                                }
                                grad_w[((o * self.in_channels + c) * 3 + di) * 3 + dj] +=
                                    g * x[(c, ii - 1, jj - 1)];
                                grad_x[(c, ii - 1, jj - 1)] += g * self.weight(o, c, di, dj);
                            }
                        }
                    }
                }
            }
        }
        grad_x
    }
}

/// A network layer: convolution or pointwise nonlinearity.
#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    Conv(Conv3x3),
    Relu,
    Sigmoid,
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// An ordered stack of [`Layer`]s with consistent channel chaining.
#[derive(Debug, Clone)]
pub struct ConvNet {
    layers: Vec<Layer>,
    in_channels: usize,
    out_channels: usize,
    /// Bumped on every parameter mutation; caches carry the revision they
    /// were computed at so a stale backward is rejected.
    revision: u64,
}

/// Per-layer inputs captured by [`ConvNet::forward`] for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    inputs: Vec<MultiChannelField>,
    revision: u64,
}

impl ConvNet {
    /// Nonlinearities are channel-agnostic; convolutions must chain:
    /// each conv's input channels equal the previous conv's output channels.
    pub fn new(layers: Vec<Layer>) -> Result<Self> {
        let mut current: Option<usize> = None;
        let mut first = None;
        for layer in &layers {
            if let Layer::Conv(conv) = layer {
                if let Some(c) = current {
                    if conv.in_channels != c {
                        return Err(Error::Shape(format!(
                            "convolution expects {} input channels but the previous \
                             layer produces {c}",
                            conv.in_channels
                        )));
                    }
                } else {
                    first = Some(conv.in_channels);
                }
                current = Some(conv.out_channels);
            }
        }
        match (first, current) {
            (Some(in_channels), Some(out_channels)) => Ok(Self {
                layers,
                in_channels,
                out_channels,
                revision: 0,
            }),
            _ => Err(Error::InvalidParam(
                "network needs at least one convolution".into(),
            )),
        }
    }

    /// Hidden width of the reference towers. Wide-and-shallow suits the
    /// aggressively decaying schedule: the optimizer gets few effective
    /// steps, and the step budget buys more as parallel channels than as
    /// depth.
    const HIDDEN: usize = 128;

    fn tower(in_channels: usize, rng: &mut Pcg32) -> Self {
        Self::new(vec![
            Layer::Conv(Conv3x3::seeded(in_channels, Self::HIDDEN, rng).unwrap()),
            Layer::Relu,
            Layer::Conv(Conv3x3::seeded(Self::HIDDEN, 1, rng).unwrap()),
            Layer::Sigmoid,
        ])
        .expect("reference architecture is well-formed")
    }

    /// Teacher encoder: raw intensity image (1 channel) → latent (1 channel).
    pub fn intensity_encoder(rng: &mut Pcg32) -> Self {
        Self::tower(1, rng)
    }

    /// Student encoder: 4-channel bipolar tensor field → latent (1 channel).
    pub fn structure_encoder(rng: &mut Pcg32) -> Self {
        Self::tower(4, rng)
    }

    /// Shallow decoder shared by both encoders during representation
    /// learning: latent (1 channel) → vessel probability.
    pub fn latent_decoder(rng: &mut Pcg32) -> Self {
        Self::tower(1, rng)
    }

    /// Final segmenter over the fused 2-channel latent stack.
    pub fn fusion_segmenter(rng: &mut Pcg32) -> Self {
        Self::tower(2, rng)
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    pub fn out_channels(&self) -> usize {
        self.out_channels
    }

    pub fn revision(&self) -> u64 {
        self.revision
    }

    pub fn parameter_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| match l {
                Layer::Conv(c) => c.parameter_count(),
                _ => 0,
            })
            .sum()
    }

    /// Flat parameter vector: layer order, weights then bias per convolution.
    pub fn parameters(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.parameter_count());
        for layer in &self.layers {
            if let Layer::Conv(c) = layer {
                out.extend_from_slice(&c.weights);
                out.extend_from_slice(&c.bias);
            }
        }
        out
    }

    /// Replaces all parameters from a flat vector (same layout as
    /// [`Self::parameters`]) and invalidates outstanding caches.
    pub fn set_parameters(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.parameter_count() {
            return Err(Error::Shape(format!(
                "parameter vector holds {} values but the network has {}",
                flat.len(),
                self.parameter_count()
            )));
        }
        let mut offset = 0;
        for layer in &mut self.layers {
            if let Layer::Conv(c) = layer {
                let nw = c.weights.len();
                c.weights.copy_from_slice(&flat[offset..offset + nw]);
                offset += nw;
                let nb = c.bias.len();
                c.bias.copy_from_slice(&flat[offset..offset + nb]);
                offset += nb;
            }
        }
        self.revision += 1;
        Ok(())
    }

    /// Runs the stack and captures each layer's input for [`Self::backward`].
    pub fn forward(&self, input: &MultiChannelField) -> Result<(MultiChannelField, ForwardCache)> {
        if input.channels() != self.in_channels {
            return Err(Error::Shape(format!(
                "network expects {} input channels, got {}",
                self.in_channels,
                input.channels()
            )));
        }
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut current = input.clone();
        for layer in &self.layers {
            let next = match layer {
                Layer::Conv(c) => c.forward(&current),
                Layer::Relu => {
                    let mut y = current.clone();
                    for v in y.data_mut() {
                        if *v < 0.0 {
                            *v = 0.0;
                        }
                    }
                    y
                }
                Layer::Sigmoid => {
                    let mut y = current.clone();
                    for v in y.data_mut() {
                        *v = sigmoid(*v);
                    }
                    y
                }
            };
            inputs.push(current);
            current = next;
        }
        Ok((
            current,
            ForwardCache {
                inputs,
                revision: self.revision,
            },
        ))
    }

    /// Chain rule from an upstream ∂loss/∂output down to a flat parameter
    /// gradient (aligned with [`Self::parameters`]) and the input gradient.
    pub fn backward(
        &self,
        cache: &ForwardCache,
        upstream: &MultiChannelField,
    ) -> Result<(Vec<f64>, MultiChannelField)> {
        if cache.revision != self.revision {
            return Err(Error::InvalidParam(
                "stale forward cache: parameters changed since it was computed".into(),
            ));
        }
        if cache.inputs.len() != self.layers.len() {
            return Err(Error::Shape(
                "forward cache does not match the layer stack".into(),
            ));
        }
        let (h, w) = (cache.inputs[0].height(), cache.inputs[0].width());
        if upstream.channels() != self.out_channels
            || upstream.height() != h
            || upstream.width() != w
        {
            return Err(Error::Shape(format!(
                "upstream gradient is {}x{}x{} but the output is {}x{h}x{w}",
                upstream.channels(),
                upstream.height(),
                upstream.width(),
                self.out_channels
            )));
        }
        // gradient slots per conv layer, in forward order
        let mut flat = vec![0.0; self.parameter_count()];
        let mut offsets = Vec::with_capacity(self.layers.len());
        let mut at = 0;
        for layer in &self.layers {
            offsets.push(at);
            if let Layer::Conv(c) = layer {
                at += c.parameter_count();
            }
        }
        let mut grad = upstream.clone();
        for (k, layer) in self.layers.iter().enumerate().rev() {
            let x = &cache.inputs[k];
            grad = match layer {
                Layer::Conv(c) => {
                    let (gw, gb) = flat[offsets[k]..offsets[k] + c.parameter_count()]
                        .split_at_mut(c.weights.len());
                    c.backward(x, &grad, gw, gb)
                }
                Layer::Relu => {
                    let mut g = grad;
                    for (gv, &xv) in g.data_mut().iter_mut().zip(x.data()) {
                        if xv <= 0.0 {
                            *gv = 0.0;
                        }
                    }
                    g
                }
                Layer::Sigmoid => {
                    let mut g = grad;
                    for (gv, &xv) in g.data_mut().iter_mut().zip(x.data()) {
                        let s = sigmoid(xv);
                        *gv *= s * (1.0 - s);
                    }
                    g
                }
            };
        }
        Ok((flat, grad))
    }

    pub fn write_checkpoint(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, net_to_bytes(self)?).map_err(|e| Error::io(path, e))
    }

    pub fn read_checkpoint(path: impl AsRef<Path>) -> Result<ConvNet> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        net_from_bytes(&bytes)
    }
}

const CHECKPOINT_MAGIC: &[u8; 4] = b"VMCK";
const CHECKPOINT_VERSION: u16 = 1;

/// Checkpoint layout: magic "VMCK", version u16 LE, layer count u16 LE, then
/// one descriptor per layer (tag u8: 0 conv / 1 relu / 2 sigmoid; convs add
/// in/out channels as u16 LE each), then all parameters as binary64 LE in
/// [`ConvNet::parameters`] order.
pub fn net_to_bytes(net: &ConvNet) -> Result<Vec<u8>> {
    if net.layers.len() > u16::MAX as usize {
        return Err(Error::Format(
            "layer count exceeds the u16 header field".into(),
        ));
    }
    let mut bytes = Vec::new();
    bytes.extend_from_slice(CHECKPOINT_MAGIC);
    bytes.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    bytes.extend_from_slice(&(net.layers.len() as u16).to_le_bytes());
    for layer in &net.layers {
        match layer {
            Layer::Conv(c) => {
                if c.in_channels > u16::MAX as usize || c.out_channels > u16::MAX as usize {
                    return Err(Error::Format(
                        "channel count exceeds the u16 descriptor field".into(),
                    ));
                }
                bytes.push(0);
                bytes.extend_from_slice(&(c.in_channels as u16).to_le_bytes());
                bytes.extend_from_slice(&(c.out_channels as u16).to_le_bytes());
            }
            Layer::Relu => bytes.push(1),
            Layer::Sigmoid => bytes.push(2),
        }
    }
    for v in net.parameters() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    Ok(bytes)
}

pub fn net_from_bytes(bytes: &[u8]) -> Result<ConvNet> {
    let need = |from: usize, len: usize| -> Result<&[u8]> {
        bytes.get(from..from + len).ok_or_else(|| {
            Error::Format(format!(
                "checkpoint truncated: wanted {len} bytes at offset {from}"
            ))
        })
    };
    if need(0, 4)? != CHECKPOINT_MAGIC {
        return Err(Error::Format("bad magic bytes: expected \"VMCK\"".into()));
    }
    let version = u16::from_le_bytes(need(4, 2)?.try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!(
            "unsupported checkpoint version {version}"
        )));
    }
    let layer_count = u16::from_le_bytes(need(6, 2)?.try_into().unwrap()) as usize;
    let mut layers = Vec::with_capacity(layer_count);
    let mut at = 8;
    for _ in 0..layer_count {
        let tag = need(at, 1)?[0];
        at += 1;
        layers.push(match tag {
            0 => {
                let ic = u16::from_le_bytes(need(at, 2)?.try_into().unwrap()) as usize;
                let oc = u16::from_le_bytes(need(at + 2, 2)?.try_into().unwrap()) as usize;
                at += 4;
                Layer::Conv(Conv3x3::zeros(ic, oc)?)
            }
            1 => Layer::Relu,
            2 => Layer::Sigmoid,
            other => {
                return Err(Error::Format(format!("unknown layer tag {other}")));
            }
        });
    }
    let mut net = ConvNet::new(layers)?;
    let count = net.parameter_count();
    let payload = need(at, count * 8)?;
    if bytes.len() != at + count * 8 {
        return Err(Error::Format(format!(
            "checkpoint holds {} trailing bytes past the parameter payload",
            bytes.len() - at - count * 8
        )));
    }
    let params: Vec<f64> = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    net.set_parameters(&params)?;
    Ok(net)
}

/// Adam moment accumulators for one network's flat parameter vector.
#[derive(Debug, Clone)]
pub struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    step: u64,
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

impl AdamState {
    pub fn new(parameter_count: usize) -> Self {
        Self {
            m: vec![0.0; parameter_count],
            v: vec![0.0; parameter_count],
            step: 0,
        }
    }

    pub fn step(&self) -> u64 {
        self.step
    }
}

/// One bias-corrected Adam update, in place:
///
/// ```text
/// m ← β1 m + (1−β1) g        v ← β2 v + (1−β2) g²
/// p ← p − lr · (m / (1−β1^t)) / (√(v / (1−β2^t)) + 1e-8)
/// ```
pub fn adam_step(net: &mut ConvNet, grads: &[f64], state: &mut AdamState, lr: f64) -> Result<()> {
    let count = net.parameter_count();
    if grads.len() != count || state.m.len() != count {
        return Err(Error::Shape(format!(
            "adam shapes disagree: {} parameters, {} gradients, {} moments",
            count,
            grads.len(),
            state.m.len()
        )));
    }
    if !lr.is_finite() || lr < 0.0 {
        return Err(Error::InvalidParam(format!(
            "learning rate must be nonnegative and finite, got {lr}"
        )));
    }
    state.step += 1;
    let t = state.step as i32;
    let bias1 = 1.0 - ADAM_BETA1.powi(t);
    let bias2 = 1.0 - ADAM_BETA2.powi(t);
    let mut params = net.parameters();
    for n in 0..count {
        let g = grads[n];
        state.m[n] = ADAM_BETA1 * state.m[n] + (1.0 - ADAM_BETA1) * g;
        state.v[n] = ADAM_BETA2 * state.v[n] + (1.0 - ADAM_BETA2) * g * g;
        let m_hat = state.m[n] / bias1;
        let v_hat = state.v[n] / bias2;
        params[n] -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
    }
    net.set_parameters(&params)
}

/// Step-decay learning-rate schedule: the rate halves every three epochs.
#[derive(Debug, Clone, Copy)]
pub struct LrSchedule {
    initial: f64,
    factor: f64,
    period_epochs: u32,
}

impl LrSchedule {
    pub fn new(initial: f64) -> Result<Self> {
        if !initial.is_finite() || initial <= 0.0 {
            return Err(Error::InvalidParam(format!(
                "initial learning rate must be positive and finite, got {initial}"
            )));
        }
        Ok(Self {
            initial,
            factor: 0.5,
            period_epochs: 3,
        })
    }

    pub fn initial(&self) -> f64 {
        self.initial
    }

    /// η · 0.5^⌊epoch/3⌋
    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.initial * self.factor.powi((epoch as u32 / self.period_epochs) as i32)
    }
}
