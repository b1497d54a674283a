//! Small dense feed-forward networks with hand-written backpropagation.
//!
//! Hidden layers use a configurable activation; the output layer is linear.
//! Weights are stored row-major, `weights[o * inputs + i]`.

use std::io::{Read, Write};

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum NnError {
    #[error("expected input of length {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("input contains a non-finite value")]
    NonFiniteInput,
    #[error("logits contain a non-finite value")]
    NonFiniteLogits,
    #[error("gradient contains a non-finite value; update rejected")]
    NonFiniteGradient,
    #[error("forward cache does not belong to this network state")]
    StaleCache,
    #[error("gradient shapes do not match the network")]
    ShapeMismatch,
    #[error("network needs at least an input and an output layer")]
    TooFewLayers,
    #[error("model stream: {0}")]
    Format(String),
}

pub type Result<T, E = NnError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Activation {
    #[default]
    Tanh,
    Relu,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::Relu => x.max(0.0),
        }
    }

    /// Derivative expressed through the activation's output.
    fn derivative_from_output(self, y: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - y * y,
            Activation::Relu => {
                if y > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }

    fn code(self) -> u8 {
        match self {
            Activation::Tanh => 0,
            Activation::Relu => 1,
        }
    }

    fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(Activation::Tanh),
            1 => Some(Activation::Relu),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub inputs: usize,
    pub outputs: usize,
    pub weights: Vec<f64>,
    pub biases: Vec<f64>,
}

impl Dense {
    fn zeros(inputs: usize, outputs: usize) -> Self {
        Self {
            inputs,
            outputs,
            weights: vec![0.0; inputs * outputs],
            biases: vec![0.0; outputs],
        }
    }

    fn affine(&self, x: &[f64]) -> Vec<f64> {
        self.weights
            .chunks_exact(self.inputs)
            .zip(&self.biases)
            .map(|(row, b)| dot(row, x) + b)
            .collect()
    }
}

/// Dot product with four independent accumulators; the summation order is fixed.
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for k in 0..4 {
            acc[k] += x[k] * y[k];
        }
    }
    let tail: f64 = ra.iter().zip(rb).map(|(x, y)| x * y).sum();
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    layer_sizes: Vec<usize>,
    activation: Activation,
    layers: Vec<Dense>,
    generation: u64,
}

/// Intermediate activations from [`Mlp::forward`], consumed by [`Mlp::backward`].
#[derive(Debug, Clone)]
pub struct ForwardCache {
    /// Layer inputs followed by the network output.
    activations: Vec<Vec<f64>>,
    layer_sizes: Vec<usize>,
    generation: u64,
}

impl ForwardCache {
    pub fn output(&self) -> &[f64] {
        self.activations.last().expect("cache holds at least the input")
    }
}

impl Mlp {
    /// All-zero parameters.
    pub fn zeros(layer_sizes: &[usize], activation: Activation) -> Result<Self> {
        if layer_sizes.len() < 2 {
            return Err(NnError::TooFewLayers);
        }
        let layers = layer_sizes.windows(2).map(|w| Dense::zeros(w[0], w[1])).collect();
        Ok(Self {
            layer_sizes: layer_sizes.to_vec(),
            activation,
            layers,
            generation: 0,
        })
    }

    /// Glorot-uniform weights in `±sqrt(6 / (fan_in + fan_out))`, zero biases.
    pub fn new(layer_sizes: &[usize], activation: Activation, rng: &mut impl Rng) -> Result<Self> {
        let mut net = Self::zeros(layer_sizes, activation)?;
        for layer in &mut net.layers {
            let bound = glorot_bound(layer.inputs, layer.outputs);
            layer
                .weights
                .iter_mut()
                .for_each(|w| *w = rng.gen_range(-bound..=bound));
        }
        Ok(net)
    }

    pub fn from_layers(activation: Activation, layers: Vec<Dense>) -> Result<Self> {
        if layers.is_empty() {
            return Err(NnError::TooFewLayers);
        }
        let mut sizes = vec![layers[0].inputs];
        for (i, l) in layers.iter().enumerate() {
            if l.weights.len() != l.inputs * l.outputs || l.biases.len() != l.outputs {
                return Err(NnError::ShapeMismatch);
            }
            if i > 0 && l.inputs != layers[i - 1].outputs {
                return Err(NnError::ShapeMismatch);
            }
            sizes.push(l.outputs);
        }
        Ok(Self {
            layer_sizes: sizes,
            activation,
            layers,
            generation: 0,
        })
    }

    pub fn layer_sizes(&self) -> &[usize] {
        &self.layer_sizes
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_sizes.last().expect("at least two layer sizes")
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.biases.len()).sum()
    }

    /// Parameters flattened layer by layer, weights before biases.
    pub fn params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for l in &self.layers {
            out.extend_from_slice(&l.weights);
            out.extend_from_slice(&l.biases);
        }
        out
    }

    pub fn set_params(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.param_count() {
            return Err(NnError::ShapeMismatch);
        }
        let mut rest = params;
        for l in &mut self.layers {
            let (w, tail) = rest.split_at(l.weights.len());
            l.weights.copy_from_slice(w);
            let (b, tail) = tail.split_at(l.biases.len());
            l.biases.copy_from_slice(b);
            rest = tail;
        }
        self.generation += 1;
        Ok(())
    }

    /// Sets one parameter by its index in [`Mlp::params`] order.
    pub fn set_param(&mut self, index: usize, value: f64) -> Result<()> {
        let mut i = index;
        for l in &mut self.layers {
            if i < l.weights.len() {
                l.weights[i] = value;
                self.generation += 1;
                return Ok(());
            }
            i -= l.weights.len();
            if i < l.biases.len() {
                l.biases[i] = value;
                self.generation += 1;
                return Ok(());
            }
            i -= l.biases.len();
        }
        Err(NnError::ShapeMismatch)
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weights.iter().chain(&l.biases).all(|v| v.is_finite()))
    }

    /// Inserts `count` input columns at position `at` of the first layer, filled by `fill`.
    pub fn insert_inputs(&mut self, at: usize, count: usize, mut fill: impl FnMut() -> f64) {
        let first = &mut self.layers[0];
        assert!(at <= first.inputs, "insertion point past the input width");
        let widened = first.inputs + count;
        let mut weights = Vec::with_capacity(widened * first.outputs);
        for row in first.weights.chunks_exact(first.inputs) {
            weights.extend_from_slice(&row[..at]);
            weights.extend((0..count).map(|_| fill()));
            weights.extend_from_slice(&row[at..]);
        }
        first.weights = weights;
        first.inputs = widened;
        self.layer_sizes[0] = widened;
        self.generation += 1;
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.input_dim() {
            return Err(NnError::DimensionMismatch {
                expected: self.input_dim(),
                got: x.len(),
            });
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(NnError::NonFiniteInput);
        }
        Ok(())
    }

    /// Output without keeping intermediates.
    pub fn predict(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_input(x)?;
        let last = self.layers.len() - 1;
        let mut h = x.to_vec();
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.affine(&h);
            if i < last {
                h.iter_mut().for_each(|v| *v = self.activation.apply(*v));
            }
        }
        Ok(h)
    }

    pub fn forward(&self, x: &[f64]) -> Result<(Vec<f64>, ForwardCache)> {
        self.check_input(x)?;
        let last = self.layers.len() - 1;
        let mut activations = Vec::with_capacity(self.layers.len() + 1);
        activations.push(x.to_vec());
        for (i, layer) in self.layers.iter().enumerate() {
            let mut h = layer.affine(activations.last().expect("non-empty"));
            if i < last {
                h.iter_mut().for_each(|v| *v = self.activation.apply(*v));
            }
            activations.push(h);
        }
        let cache = ForwardCache {
            activations,
            layer_sizes: self.layer_sizes.clone(),
            generation: self.generation,
        };
        Ok((cache.output().to_vec(), cache))
    }

    /// Gradients of a scalar loss with respect to every parameter, given
    /// the loss gradient with respect to the network output.
    pub fn backward(&self, cache: &ForwardCache, output_grad: &[f64]) -> Result<Gradients> {
        if cache.generation != self.generation || cache.layer_sizes != self.layer_sizes {
            return Err(NnError::StaleCache);
        }
        if output_grad.len() != self.output_dim() {
            return Err(NnError::DimensionMismatch {
                expected: self.output_dim(),
                got: output_grad.len(),
            });
        }
        let mut grads = Gradients::zeros_like(self);
        let mut delta = output_grad.to_vec();
        for (i, layer) in self.layers.iter().enumerate().rev() {
            let input = &cache.activations[i];
            let g = &mut grads.layers[i];
            for (o, d) in delta.iter().enumerate() {
                g.biases[o] = *d;
                let row = &mut g.weights[o * layer.inputs..(o + 1) * layer.inputs];
                row.iter_mut().zip(input).for_each(|(gw, x)| *gw = d * x);
            }
            if i == 0 {
                break;
            }
            let mut prev = vec![0.0; layer.inputs];
            for (o, d) in delta.iter().enumerate() {
                let row = &layer.weights[o * layer.inputs..(o + 1) * layer.inputs];
                prev.iter_mut().zip(row).for_each(|(p, w)| *p += w * d);
            }
            prev.iter_mut()
                .zip(input)
                .for_each(|(p, y)| *p *= self.activation.derivative_from_output(*y));
            delta = prev;
        }
        Ok(grads)
    }

    fn add_scaled(&mut self, dir: &[f64]) {
        let mut k = 0;
        for l in &mut self.layers {
            for p in l.weights.iter_mut().chain(l.biases.iter_mut()) {
                *p += dir[k];
                k += 1;
            }
        }
        self.generation += 1;
    }
}

pub fn glorot_bound(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseGrad {
    pub weights: Vec<f64>,
    pub biases: Vec<f64>,
}

/// Per-parameter partial derivatives, shaped like the owning network.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<DenseGrad>,
}

impl Gradients {
    pub fn zeros_like(net: &Mlp) -> Self {
        Self {
            layers: net
                .layers
                .iter()
                .map(|l| DenseGrad {
                    weights: vec![0.0; l.weights.len()],
                    biases: vec![0.0; l.biases.len()],
                })
                .collect(),
        }
    }

    fn values(&self) -> impl Iterator<Item = &f64> {
        self.layers.iter().flat_map(|l| l.weights.iter().chain(&l.biases))
    }

    fn values_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.layers
            .iter_mut()
            .flat_map(|l| l.weights.iter_mut().chain(l.biases.iter_mut()))
    }

    /// Flattened in the same order as [`Mlp::params`].
    pub fn flat(&self) -> Vec<f64> {
        self.values().copied().collect()
    }

    pub fn norm(&self) -> f64 {
        self.values().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.values().all(|v| v.is_finite())
    }

    pub fn scale(&mut self, k: f64) {
        self.values_mut().for_each(|v| *v *= k);
    }

    /// `self += k * other`
    pub fn add_scaled(&mut self, other: &Gradients, k: f64) -> Result<()> {
        if !self.congruent(other) {
            return Err(NnError::ShapeMismatch);
        }
        self.values_mut().zip(other.values()).for_each(|(a, b)| *a += k * b);
        Ok(())
    }

    fn congruent(&self, other: &Gradients) -> bool {
        self.layers.len() == other.layers.len()
            && self.layers.iter().zip(&other.layers).all(|(a, b)| {
                a.weights.len() == b.weights.len() && a.biases.len() == b.biases.len()
            })
    }

    fn matches(&self, net: &Mlp) -> bool {
        self.layers.len() == net.layers.len()
            && self.layers.iter().zip(&net.layers).all(|(g, l)| {
                g.weights.len() == l.weights.len() && g.biases.len() == l.biases.len()
            })
    }
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
    logits.iter().map(|l| l - lse).collect()
}

/// Shannon entropy in nats.
pub fn entropy(probs: &[f64]) -> f64 {
    -probs
        .iter()
        .filter(|&&p| p > 0.0)
        .map(|p| p * p.ln())
        .sum::<f64>()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub index: usize,
    pub log_prob: f64,
    pub probs: Vec<f64>,
}

/// Draws an index from the softmax distribution over `logits`.
pub fn softmax_sample(logits: &[f64], rng: &mut impl Rng) -> Result<Sample> {
    if logits.is_empty() || logits.iter().any(|l| !l.is_finite()) {
        return Err(NnError::NonFiniteLogits);
    }
    let probs = softmax(logits);
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    let mut index = probs.len() - 1;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            index = i;
            break;
        }
    }
    let log_prob = log_softmax(logits)[index];
    Ok(Sample {
        index,
        log_prob,
        probs,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum OptimizerKind {
    #[default]
    Sgd,
    Momentum {
        beta: f64,
    },
    RmsProp {
        decay: f64,
        eps: f64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Ascent,
    Descent,
}

/// Update rule plus its running statistics for one network.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub kind: OptimizerKind,
    pub clip_norm: Option<f64>,
    buffer: Vec<f64>,
}

impl OptimizerState {
    pub fn new(kind: OptimizerKind, clip_norm: Option<f64>) -> Self {
        Self {
            kind,
            clip_norm,
            buffer: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UpdateStats {
    pub grad_norm: f64,
    pub clipped: bool,
}

/// Moves `net` along (ascent) or against (descent) `grads`.
///
/// With clipping configured, gradients whose norm exceeds the limit are
/// rescaled to it before the rule is applied. Non-finite gradients leave
/// the network untouched.
pub fn apply_update(
    net: &mut Mlp,
    grads: &Gradients,
    state: &mut OptimizerState,
    lr: f64,
    direction: Direction,
) -> Result<UpdateStats> {
    if !grads.matches(net) {
        return Err(NnError::ShapeMismatch);
    }
    if !grads.is_finite() {
        return Err(NnError::NonFiniteGradient);
    }
    let grad_norm = grads.norm();
    let mut g = grads.flat();
    let clipped = match state.clip_norm {
        Some(limit) if grad_norm > limit => {
            let k = limit / grad_norm;
            g.iter_mut().for_each(|v| *v *= k);
            true
        }
        _ => false,
    };
    let sign = match direction {
        Direction::Ascent => 1.0,
        Direction::Descent => -1.0,
    };
    if state.buffer.len() != g.len() {
        state.buffer = vec![0.0; g.len()];
    }
    let step: Vec<f64> = match state.kind {
        OptimizerKind::Sgd => g.iter().map(|v| sign * lr * v).collect(),
        OptimizerKind::Momentum { beta } => state
            .buffer
            .iter_mut()
            .zip(&g)
            .map(|(m, v)| {
                *m = beta * *m + v;
                sign * lr * *m
            })
            .collect(),
        OptimizerKind::RmsProp { decay, eps } => state
            .buffer
            .iter_mut()
            .zip(&g)
            .map(|(s, v)| {
                *s = decay * *s + (1.0 - decay) * v * v;
                sign * lr * v / (s.sqrt() + eps)
            })
            .collect(),
    };
    net.add_scaled(&step);
    Ok(UpdateStats { grad_norm, clipped })
}

const MAGIC: &[u8; 4] = b"SNTM";
pub const FORMAT_VERSION: u32 = 1;

/// Binary model file, all integers and floats little-endian:
///
/// | bytes | content |
/// |-------|---------|
/// | 4 | magic `SNTM` |
/// | 4 | format version (u32) |
/// | 1 | activation (0 = tanh, 1 = relu) |
/// | 4 | number of layer sizes `k` (u32) |
/// | 8k | layer sizes (u64 each) |
/// | 8n | parameters as f64 bit patterns, per layer weights (row-major) then biases |
pub fn serialize(net: &Mlp, out: &mut impl Write) -> std::io::Result<()> {
    out.write_all(MAGIC)?;
    out.write_all(&FORMAT_VERSION.to_le_bytes())?;
    out.write_all(&[net.activation.code()])?;
    out.write_all(&(net.layer_sizes.len() as u32).to_le_bytes())?;
    for &s in &net.layer_sizes {
        out.write_all(&(s as u64).to_le_bytes())?;
    }
    for p in net.params() {
        out.write_all(&p.to_bits().to_le_bytes())?;
    }
    Ok(())
}

pub fn to_bytes(net: &Mlp) -> Vec<u8> {
    let mut buf = Vec::new();
    serialize(net, &mut buf).expect("writing to a Vec cannot fail");
    buf
}

fn read_exact<const N: usize>(input: &mut impl Read, what: &str) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    input
        .read_exact(&mut buf)
        .map_err(|_| NnError::Format(format!("truncated stream while reading {what}")))?;
    Ok(buf)
}

pub fn deserialize(input: &mut impl Read) -> Result<Mlp> {
    if &read_exact::<4>(input, "magic")? != MAGIC {
        return Err(NnError::Format("bad magic".into()));
    }
    let version = u32::from_le_bytes(read_exact(input, "version")?);
    if version != FORMAT_VERSION {
        return Err(NnError::Format(format!(
            "unsupported format version {version}, expected {FORMAT_VERSION}"
        )));
    }
    let [code] = read_exact::<1>(input, "activation")?;
    let activation =
        Activation::from_code(code).ok_or_else(|| NnError::Format(format!("unknown activation {code}")))?;
    let count = u32::from_le_bytes(read_exact(input, "layer count")?) as usize;
    if !(2..=64).contains(&count) {
        return Err(NnError::Format(format!("implausible layer count {count}")));
    }
    let mut sizes = Vec::with_capacity(count);
    for _ in 0..count {
        let s = u64::from_le_bytes(read_exact(input, "layer size")?);
        if s == 0 || s > 1 << 24 {
            return Err(NnError::Format(format!("implausible layer size {s}")));
        }
        sizes.push(s as usize);
    }
    let mut net = Mlp::zeros(&sizes, activation)?;
    let mut params = Vec::with_capacity(net.param_count());
    for _ in 0..net.param_count() {
        params.push(f64::from_bits(u64::from_le_bytes(read_exact(input, "parameters")?)));
    }
    let mut probe = [0u8; 1];
    if input.read(&mut probe).map_err(|e| NnError::Format(e.to_string()))? != 0 {
        return Err(NnError::Format("trailing bytes after parameters".into()));
    }
    net.set_params(&params)?;
    net.generation = 0;
    Ok(net)
}

pub fn from_bytes(mut bytes: &[u8]) -> Result<Mlp> {
    deserialize(&mut bytes)
}
