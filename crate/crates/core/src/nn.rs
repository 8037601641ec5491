//! Dense networks with manual backpropagation, categorical embeddings,
//! gradient reversal and plain SGD.

use std::io::{Read, Write};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Negative-side slope of the leaky ReLU.
pub const LEAKY_SLOPE: f64 = 0.01;

/// Probabilities are clamped to `[EPS, 1 - EPS]` inside the BCE loss.
pub const BCE_EPS: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    LeakyRelu,
    Sigmoid,
    Identity,
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::LeakyRelu => {
                if x > 0.0 {
                    x
                } else {
                    LEAKY_SLOPE * x
                }
            }
            Activation::Sigmoid => sigmoid(x),
            Activation::Identity => x,
        }
    }

    /// Derivative given the pre-activation and the activation output.
    fn derivative(self, pre: f64, out: f64) -> f64 {
        match self {
            Activation::LeakyRelu => {
                if pre > 0.0 {
                    1.0
                } else {
                    LEAKY_SLOPE
                }
            }
            Activation::Sigmoid => out * (1.0 - out),
            Activation::Identity => 1.0,
        }
    }
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Binary cross-entropy of a probability against a 0/1 label, with the
/// derivative of the loss with respect to the logit that produced `p_hat`.
pub fn bce_loss(p_hat: f64, y: u8) -> (f64, f64) {
    let p = p_hat.clamp(BCE_EPS, 1.0 - BCE_EPS);
    let yf = y as f64;
    let loss = -(yf * p.ln() + (1.0 - yf) * (1.0 - p).ln());
    (loss, p_hat - yf)
}

/// Identity on the forward pass.
pub fn grl_forward(x: &[f64]) -> Vec<f64> {
    x.to_vec()
}

/// Gradient reversal: `-lambda * upstream`.
pub fn grl_backward(upstream: &[f64], lambda: f64) -> Vec<f64> {
    upstream.iter().map(|g| -lambda * g).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub in_dim: usize,
    pub out_dim: usize,
    /// Row-major `out_dim x in_dim`.
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
    pub activation: Activation,
}

impl Dense {
    pub fn zeros(in_dim: usize, out_dim: usize, activation: Activation) -> Self {
        Dense { in_dim, out_dim, weights: vec![0.0; in_dim * out_dim], bias: vec![0.0; out_dim], activation }
    }

    /// He-style uniform initialisation scaled by fan-in.
    pub fn init<R: Rng + ?Sized>(in_dim: usize, out_dim: usize, activation: Activation, rng: &mut R) -> Self {
        let limit = (6.0 / in_dim.max(1) as f64).sqrt();
        let weights = (0..in_dim * out_dim).map(|_| rng.random_range(-limit..limit)).collect();
        Dense { in_dim, out_dim, weights, bias: vec![0.0; out_dim], activation }
    }

    fn pre_activation(&self, x: &[f64]) -> Vec<f64> {
        self.weights
            .chunks_exact(self.in_dim)
            .zip(&self.bias)
            .map(|(row, b)| row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>() + b)
            .collect()
    }
}

/// A feed-forward stack of dense layers.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DenseNet {
    layers: Vec<Dense>,
    /// Bumped on every parameter update so that stale tapes are detected.
    #[serde(skip)]
    version: u64,
}

impl PartialEq for DenseNet {
    fn eq(&self, other: &Self) -> bool {
        self.layers == other.layers
    }
}

/// Activations recorded by a forward pass.
#[derive(Clone, Debug, Default)]
pub struct Tape {
    version: u64,
    shapes: Vec<(usize, usize)>,
    inputs: Vec<Vec<f64>>,
    pre: Vec<Vec<f64>>,
    outputs: Vec<Vec<f64>>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn output(&self) -> Option<&[f64]> {
        self.outputs.last().map(|v| v.as_slice())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DenseGrads {
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

/// Gradients shaped like the [`DenseNet`] they address.
#[derive(Clone, Debug, PartialEq)]
pub struct NetGrads {
    pub layers: Vec<DenseGrads>,
}

impl NetGrads {
    pub fn zeros_like(net: &DenseNet) -> Self {
        NetGrads {
            layers: net
                .layers
                .iter()
                .map(|l| DenseGrads { weights: vec![0.0; l.weights.len()], bias: vec![0.0; l.bias.len()] })
                .collect(),
        }
    }

    pub fn add_assign(&mut self, other: &NetGrads) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.weights.iter_mut().zip(&b.weights).for_each(|(x, y)| *x += y);
            a.bias.iter_mut().zip(&b.bias).for_each(|(x, y)| *x += y);
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for l in &mut self.layers {
            l.weights.iter_mut().for_each(|x| *x *= factor);
            l.bias.iter_mut().for_each(|x| *x *= factor);
        }
    }

    pub fn is_zero(&self) -> bool {
        self.layers.iter().all(|l| l.weights.iter().chain(&l.bias).all(|&x| x == 0.0))
    }

    pub fn flat(&self) -> Vec<f64> {
        self.layers.iter().flat_map(|l| l.weights.iter().chain(&l.bias).copied()).collect()
    }
}

/// Parse architecture strings such as `FC(28->56)-FC(56->28)-FC(28->14)`;
/// the unicode arrow `→` is accepted as well. Returns the layer widths.
pub fn parse_arch(arch: &str) -> Result<Vec<usize>> {
    let bad = |m: &str| Error::Invalid(format!("architecture `{arch}`: {m}"));
    let mut dims: Vec<usize> = Vec::new();
    for part in arch.split(")-") {
        let part = part.trim().trim_end_matches(')');
        let inner = part.strip_prefix("FC(").ok_or_else(|| bad("expected FC(a->b)"))?;
        let inner = inner.replace('→', "->");
        let (a, b) = inner.split_once("->").ok_or_else(|| bad("missing arrow"))?;
        let a: usize = a.trim().parse().map_err(|_| bad("input width is not an integer"))?;
        let b: usize = b.trim().parse().map_err(|_| bad("output width is not an integer"))?;
        if a == 0 || b == 0 {
            return Err(bad("zero width"));
        }
        match dims.last() {
            None => dims.push(a),
            Some(&prev) if prev == a => {}
            Some(&prev) => return Err(bad(&format!("layer input {a} does not chain to previous output {prev}"))),
        }
        dims.push(b);
    }
    Ok(dims)
}

pub fn format_arch(dims: &[usize]) -> String {
    dims.windows(2).map(|w| format!("FC({}->{})", w[0], w[1])).collect::<Vec<_>>().join("-")
}

impl DenseNet {
    pub fn new(layers: Vec<Dense>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Invalid("network needs at least one layer".into()));
        }
        for l in &layers {
            if l.weights.len() != l.in_dim * l.out_dim || l.bias.len() != l.out_dim {
                return Err(Error::dim("dense layer parameters", l.in_dim * l.out_dim, l.weights.len()));
            }
        }
        for pair in layers.windows(2) {
            if pair[0].out_dim != pair[1].in_dim {
                return Err(Error::dim("layer chaining", pair[0].out_dim, pair[1].in_dim));
            }
        }
        Ok(DenseNet { layers, version: 0 })
    }

    /// Layers of the given widths; `hidden` between layers, `output` last.
    pub fn init<R: Rng + ?Sized>(dims: &[usize], hidden: Activation, output: Activation, rng: &mut R) -> Result<Self> {
        if dims.len() < 2 {
            return Err(Error::Invalid("need at least input and output widths".into()));
        }
        let n = dims.len() - 1;
        let layers = (0..n)
            .map(|i| Dense::init(dims[i], dims[i + 1], if i + 1 == n { output } else { hidden }, rng))
            .collect();
        DenseNet::new(layers)
    }

    pub fn from_arch<R: Rng + ?Sized>(arch: &str, hidden: Activation, output: Activation, rng: &mut R) -> Result<Self> {
        DenseNet::init(&parse_arch(arch)?, hidden, output, rng)
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Dense] {
        self.version += 1;
        &mut self.layers
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim
    }

    pub fn dims(&self) -> Vec<usize> {
        std::iter::once(self.in_dim()).chain(self.layers.iter().map(|l| l.out_dim)).collect()
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.bias.len()).sum()
    }

    pub fn forward(&self, x: &[f64], tape: &mut Tape) -> Result<Vec<f64>> {
        if x.len() != self.in_dim() {
            return Err(Error::dim("network input", self.in_dim(), x.len()));
        }
        tape.version = self.version;
        tape.shapes = self.layers.iter().map(|l| (l.in_dim, l.out_dim)).collect();
        tape.inputs.clear();
        tape.pre.clear();
        tape.outputs.clear();
        let mut cur = x.to_vec();
        for l in &self.layers {
            let pre = l.pre_activation(&cur);
            let out: Vec<f64> = pre.iter().map(|&z| l.activation.apply(z)).collect();
            tape.inputs.push(std::mem::replace(&mut cur, out.clone()));
            tape.pre.push(pre);
            tape.outputs.push(out);
        }
        Ok(cur)
    }

    /// Forward pass without recording.
    pub fn predict(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.in_dim() {
            return Err(Error::dim("network input", self.in_dim(), x.len()));
        }
        let mut cur = x.to_vec();
        for l in &self.layers {
            cur = l.pre_activation(&cur).into_iter().map(|z| l.activation.apply(z)).collect();
        }
        Ok(cur)
    }

    /// Gradients of `upstream · output` with respect to the parameters and the
    /// input.
    pub fn backward(&self, tape: &Tape, upstream: &[f64]) -> Result<(NetGrads, Vec<f64>)> {
        let mut grads = NetGrads::zeros_like(self);
        let down = self.backward_into(tape, upstream, &mut grads)?;
        Ok((grads, down))
    }

    /// Like [`DenseNet::backward`] but adds into an existing accumulator.
    pub fn backward_into(&self, tape: &Tape, upstream: &[f64], grads: &mut NetGrads) -> Result<Vec<f64>> {
        let shapes: Vec<_> = self.layers.iter().map(|l| (l.in_dim, l.out_dim)).collect();
        if tape.shapes != shapes || tape.outputs.len() != self.layers.len() {
            return Err(Error::Invalid("tape was recorded on a different network".into()));
        }
        if tape.version != self.version {
            return Err(Error::Invalid("stale tape: network was updated after the forward pass".into()));
        }
        if upstream.len() != self.out_dim() {
            return Err(Error::dim("backward upstream", self.out_dim(), upstream.len()));
        }
        if grads.layers.len() != self.layers.len()
            || grads.layers.iter().zip(&self.layers).any(|(g, l)| g.weights.len() != l.weights.len())
        {
            return Err(Error::dim("gradient accumulator", self.layers.len(), grads.layers.len()));
        }
        let mut delta = upstream.to_vec();
        for (i, l) in self.layers.iter().enumerate().rev() {
            for (o, d) in delta.iter_mut().enumerate() {
                *d *= l.activation.derivative(tape.pre[i][o], tape.outputs[i][o]);
            }
            let input = &tape.inputs[i];
            let g = &mut grads.layers[i];
            let mut down = vec![0.0; l.in_dim];
            for (o, &d) in delta.iter().enumerate() {
                if d == 0.0 {
                    continue;
                }
                let row = &l.weights[o * l.in_dim..(o + 1) * l.in_dim];
                let grow = &mut g.weights[o * l.in_dim..(o + 1) * l.in_dim];
                for j in 0..l.in_dim {
                    grow[j] += d * input[j];
                    down[j] += d * row[j];
                }
                g.bias[o] += d;
            }
            delta = down;
        }
        Ok(delta)
    }

    pub fn params_flat(&self) -> Vec<f64> {
        self.layers.iter().flat_map(|l| l.weights.iter().chain(&l.bias).copied()).collect()
    }

    pub fn set_params_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_params() {
            return Err(Error::dim("flat parameter vector", self.num_params(), flat.len()));
        }
        let mut it = flat.iter().copied();
        for l in self.layers_mut() {
            l.weights.iter_mut().chain(l.bias.iter_mut()).for_each(|p| *p = it.next().unwrap_or(0.0));
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.layers.iter().all(|l| l.weights.iter().chain(&l.bias).all(|x| x.is_finite()))
    }

    pub fn zero_all(&mut self) {
        for l in self.layers_mut() {
            l.weights.iter_mut().for_each(|x| *x = 0.0);
            l.bias.iter_mut().for_each(|x| *x = 0.0);
        }
    }
}

/// `p <- p - eta * g` on every layer.
pub fn sgd_step(net: &mut DenseNet, grads: &NetGrads, eta: f64) -> Result<()> {
    check_eta(eta)?;
    if grads.layers.len() != net.layers.len() {
        return Err(Error::dim("gradient layers", net.layers.len(), grads.layers.len()));
    }
    for (l, g) in net.layers.iter().zip(&grads.layers) {
        if g.weights.len() != l.weights.len() || g.bias.len() != l.bias.len() {
            return Err(Error::dim("gradient shape", l.weights.len(), g.weights.len()));
        }
    }
    for (l, g) in net.layers_mut().iter_mut().zip(&grads.layers) {
        l.weights.iter_mut().zip(&g.weights).for_each(|(p, d)| *p -= eta * d);
        l.bias.iter_mut().zip(&g.bias).for_each(|(p, d)| *p -= eta * d);
    }
    if !net.is_finite() {
        return Err(Error::NonFinite("network parameters after SGD".into()));
    }
    Ok(())
}

/// SGD on a flat parameter slice.
pub fn sgd_step_slice(params: &mut [f64], grads: &[f64], eta: f64) -> Result<()> {
    check_eta(eta)?;
    if params.len() != grads.len() {
        return Err(Error::dim("gradient shape", params.len(), grads.len()));
    }
    params.iter_mut().zip(grads).for_each(|(p, g)| *p -= eta * g);
    if params.iter().any(|p| !p.is_finite()) {
        return Err(Error::NonFinite("parameters after SGD".into()));
    }
    Ok(())
}

fn check_eta(eta: f64) -> Result<()> {
    if !(eta > 0.0 && eta.is_finite()) {
        return Err(Error::Invalid(format!("learning rate must be positive, got {eta}")));
    }
    Ok(())
}

/// Default embedding width for a vocabulary.
pub fn default_embedding_dim(vocab: usize) -> usize {
    8.min(vocab.div_ceil(2)).max(1)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Embedding {
    pub vocab: usize,
    pub dim: usize,
    /// Row-major `vocab x dim`.
    pub matrix: Vec<f64>,
}

impl Embedding {
    pub fn init<R: Rng + ?Sized>(vocab: usize, dim: usize, rng: &mut R) -> Self {
        let limit = (3.0 / dim.max(1) as f64).sqrt();
        Embedding { vocab, dim, matrix: (0..vocab * dim).map(|_| rng.random_range(-limit..limit)).collect() }
    }

    pub fn lookup(&self, index: usize) -> Result<&[f64]> {
        if index >= self.vocab {
            return Err(Error::Data(format!("category index {index} outside vocabulary of {}", self.vocab)));
        }
        Ok(&self.matrix[index * self.dim..(index + 1) * self.dim])
    }
}

/// One embedding matrix per categorical column.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingTable {
    pub columns: Vec<Embedding>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingGrads {
    pub columns: Vec<Vec<f64>>,
}

impl EmbeddingTable {
    pub fn lookup(&self, column: usize, index: usize) -> Result<&[f64]> {
        self.columns
            .get(column)
            .ok_or_else(|| Error::Data(format!("no embedding for categorical column {column}")))?
            .lookup(index)
    }

    pub fn zero_grads(&self) -> EmbeddingGrads {
        EmbeddingGrads { columns: self.columns.iter().map(|e| vec![0.0; e.matrix.len()]).collect() }
    }

    /// Accumulate `grad` into the row addressed by `(column, index)`.
    pub fn accumulate(&self, grads: &mut EmbeddingGrads, column: usize, index: usize, grad: &[f64]) -> Result<()> {
        let e = &self.columns[column];
        if index >= e.vocab || grad.len() != e.dim {
            return Err(Error::dim("embedding gradient", e.dim, grad.len()));
        }
        grads.columns[column][index * e.dim..(index + 1) * e.dim]
            .iter_mut()
            .zip(grad)
            .for_each(|(a, g)| *a += g);
        Ok(())
    }

    pub fn sgd_step(&mut self, grads: &EmbeddingGrads, eta: f64) -> Result<()> {
        for (e, g) in self.columns.iter_mut().zip(&grads.columns) {
            sgd_step_slice(&mut e.matrix, g, eta)?;
        }
        Ok(())
    }
}

impl EmbeddingGrads {
    pub fn add_assign(&mut self, other: &EmbeddingGrads) {
        for (a, b) in self.columns.iter_mut().zip(&other.columns) {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        }
    }

    pub fn is_zero(&self) -> bool {
        self.columns.iter().all(|c| c.iter().all(|&x| x == 0.0))
    }
}

/// Checkpoint of a single network: versioned JSON of shapes and flat
/// parameters, or the same header followed by raw little-endian `f64`s.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetCheckpoint {
    pub version: u32,
    pub dims: Vec<usize>,
    pub activations: Vec<Activation>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub params: Vec<f64>,
}

impl NetCheckpoint {
    pub const VERSION: u32 = 1;

    pub fn of(net: &DenseNet) -> Self {
        NetCheckpoint {
            version: Self::VERSION,
            dims: net.dims(),
            activations: net.layers.iter().map(|l| l.activation).collect(),
            params: net.params_flat(),
        }
    }

    pub fn restore(&self) -> Result<DenseNet> {
        if self.version != Self::VERSION {
            return Err(Error::Serde(format!("unsupported checkpoint version {}", self.version)));
        }
        if self.dims.len() != self.activations.len() + 1 {
            return Err(Error::dim("checkpoint activations", self.dims.len() - 1, self.activations.len()));
        }
        let layers = self
            .dims
            .windows(2)
            .zip(&self.activations)
            .map(|(w, &a)| Dense::zeros(w[0], w[1], a))
            .collect();
        let mut net = DenseNet::new(layers)?;
        net.set_params_flat(&self.params)?;
        Ok(net)
    }

    pub fn write_binary<W: Write>(&self, mut w: W) -> Result<()> {
        let header = NetCheckpoint { params: Vec::new(), ..self.clone() };
        let json = serde_json::to_vec(&header)?;
        let io = |e| Error::io("<checkpoint>", e);
        w.write_all(&(json.len() as u64).to_le_bytes()).map_err(io)?;
        w.write_all(&json).map_err(io)?;
        for p in &self.params {
            w.write_all(&p.to_le_bytes()).map_err(io)?;
        }
        Ok(())
    }

    pub fn read_binary<R: Read>(mut r: R) -> Result<Self> {
        let io = |e| Error::io("<checkpoint>", e);
        let mut len = [0u8; 8];
        r.read_exact(&mut len).map_err(io)?;
        let mut json = vec![0u8; u64::from_le_bytes(len) as usize];
        r.read_exact(&mut json).map_err(io)?;
        let mut ck: NetCheckpoint = serde_json::from_slice(&json)?;
        let n: usize = ck.dims.windows(2).map(|w| w[0] * w[1] + w[1]).sum();
        let mut buf = [0u8; 8];
        ck.params = (0..n)
            .map(|_| r.read_exact(&mut buf).map(|_| f64::from_le_bytes(buf)))
            .collect::<std::io::Result<_>>()
            .map_err(io)?;
        Ok(ck)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    fn rng(seed: u64) -> ChaCha20Rng {
        ChaCha20Rng::seed_from_u64(seed)
    }

    #[test]
    fn identity_layer_passes_input_through() {
        let mut l = Dense::zeros(2, 2, Activation::Identity);
        l.weights = vec![1.0, 0.0, 0.0, 1.0];
        let net = DenseNet::new(vec![l]).unwrap();
        assert_eq!(net.forward(&[1.0, 2.0], &mut Tape::new()).unwrap(), vec![1.0, 2.0]);
    }

    #[test]
    fn zero_weights_give_bias() {
        let mut l = Dense::zeros(3, 2, Activation::Identity);
        l.bias = vec![0.5, -1.5];
        let net = DenseNet::new(vec![l]).unwrap();
        assert_eq!(net.predict(&[3.0, -2.0, 9.0]).unwrap(), vec![0.5, -1.5]);
    }

    #[test]
    fn forward_matches_hand_rolled_matmul() {
        let net = DenseNet::init(&[4, 5, 3], Activation::LeakyRelu, Activation::Sigmoid, &mut rng(1)).unwrap();
        let x = [0.3, -1.2, 0.8, 2.0];
        let mut h = vec![0.0; 5];
        let l0 = &net.layers()[0];
        for o in 0..5 {
            let mut s = l0.bias[o];
            for i in 0..4 {
                s += l0.weights[o * 4 + i] * x[i];
            }
            h[o] = if s > 0.0 { s } else { 0.01 * s };
        }
        let l1 = &net.layers()[1];
        let expected: Vec<f64> = (0..3)
            .map(|o| {
                let mut s = l1.bias[o];
                for i in 0..5 {
                    s += l1.weights[o * 5 + i] * h[i];
                }
                1.0 / (1.0 + (-s).exp())
            })
            .collect();
        let got = net.forward(&x, &mut Tape::new()).unwrap();
        for (a, b) in got.iter().zip(&expected) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn dimension_errors() {
        let net = DenseNet::init(&[3, 2], Activation::Identity, Activation::Identity, &mut rng(2)).unwrap();
        assert!(matches!(net.forward(&[1.0], &mut Tape::new()), Err(Error::Dimension { .. })));
        let bad = DenseNet::new(vec![Dense::zeros(2, 3, Activation::Identity), Dense::zeros(4, 1, Activation::Identity)]);
        assert!(bad.is_err());
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let net = DenseNet::init(&[3, 4, 2], Activation::LeakyRelu, Activation::Identity, &mut rng(3)).unwrap();
        let mut tape = Tape::new();
        net.forward(&[1.0, 2.0, 3.0], &mut tape).unwrap();
        let (g, down) = net.backward(&tape, &[0.0, 0.0]).unwrap();
        assert!(g.is_zero());
        assert!(down.iter().all(|&d| d == 0.0));
    }

    #[test]
    fn linear_downstream_is_transpose_product() {
        let net = DenseNet::init(&[3, 2], Activation::Identity, Activation::Identity, &mut rng(4)).unwrap();
        let mut tape = Tape::new();
        net.forward(&[0.1, 0.2, 0.3], &mut tape).unwrap();
        let up = [1.5, -0.5];
        let (_, down) = net.backward(&tape, &up).unwrap();
        let w = &net.layers()[0].weights;
        for j in 0..3 {
            assert_eq!(down[j], w[j] * up[0] + w[3 + j] * up[1]);
        }
    }

    #[test]
    fn stale_and_foreign_tapes_are_rejected() {
        let mut net = DenseNet::init(&[2, 2], Activation::Identity, Activation::Identity, &mut rng(5)).unwrap();
        let other = DenseNet::init(&[2, 3], Activation::Identity, Activation::Identity, &mut rng(5)).unwrap();
        let mut tape = Tape::new();
        other.forward(&[1.0, 1.0], &mut tape).unwrap();
        assert!(net.backward(&tape, &[1.0, 1.0]).is_err());
        net.forward(&[1.0, 1.0], &mut tape).unwrap();
        let (g, _) = net.backward(&tape, &[1.0, 1.0]).unwrap();
        sgd_step(&mut net, &g, 0.1).unwrap();
        assert!(net.backward(&tape, &[1.0, 1.0]).is_err());
    }

    #[test]
    fn grl_examples() {
        assert_eq!(grl_backward(&[2.0, -3.0], 0.0), vec![-0.0, 0.0]);
        assert_eq!(grl_backward(&[2.0, -3.0], 1.0), vec![-2.0, 3.0]);
        assert_eq!(grl_forward(&[0.25, -7.0]), vec![0.25, -7.0]);
    }

    #[test]
    fn sgd_examples() {
        let mut p = [1.0];
        sgd_step_slice(&mut p, &[2.0], 0.5).unwrap();
        assert_eq!(p, [0.0]);
        let mut q = [3.0, 4.0];
        sgd_step_slice(&mut q, &[0.0, 0.0], 0.1).unwrap();
        assert_eq!(q, [3.0, 4.0]);
        assert!(sgd_step_slice(&mut q, &[1.0, 1.0], 0.0).is_err());
        assert!(sgd_step_slice(&mut q, &[1.0], 0.1).is_err());
    }

    #[test]
    fn sgd_descends_a_quadratic_monotonically() {
        // f(p) = (p - 3)^2, gradient 2(p - 3); closed form p_t = 3 + (p_0 - 3)(1 - 2 eta)^t
        let eta = 0.1;
        let mut p = [-2.0];
        let mut last = f64::INFINITY;
        for t in 1..=10 {
            let g = [2.0 * (p[0] - 3.0)];
            sgd_step_slice(&mut p, &g, eta).unwrap();
            let loss = (p[0] - 3.0f64).powi(2);
            assert!(loss < last);
            last = loss;
            let closed = 3.0 + (-5.0) * (1.0 - 2.0 * eta).powi(t);
            assert!((p[0] - closed).abs() < 1e-12);
        }
    }

    #[test]
    fn bce_examples() {
        let (l, d) = bce_loss(0.5, 1);
        assert!((l - 2f64.ln()).abs() < 1e-15);
        assert_eq!(d, -0.5);
        assert!(bce_loss(1.0 - 1e-15, 1).0 < 1e-11);
        assert!(bce_loss(1e-15, 0).0 < 1e-11);
        assert!(bce_loss(0.0, 1).0.is_finite());
    }

    #[test]
    fn arch_parsing() {
        assert_eq!(parse_arch("FC(28->56)-FC(56->28)-FC(28->14)").unwrap(), vec![28, 56, 28, 14]);
        assert_eq!(parse_arch("FC(25→50)-FC(50→12)").unwrap(), vec![25, 50, 12]);
        assert!(parse_arch("FC(51->81)-FC(82->55)").is_err());
        assert!(parse_arch("Conv(3->4)").is_err());
        assert_eq!(format_arch(&[4, 8, 2]), "FC(4->8)-FC(8->2)");
    }

    #[test]
    fn embedding_lookup_bounds() {
        let e = Embedding::init(3, 2, &mut rng(6));
        assert!(e.lookup(2).is_ok());
        assert!(e.lookup(3).is_err());
        assert_eq!(default_embedding_dim(3), 2);
        assert_eq!(default_embedding_dim(40), 8);
        assert_eq!(default_embedding_dim(1), 1);
    }

    #[test]
    fn checkpoint_round_trips() {
        let net = DenseNet::init(&[3, 4, 1], Activation::LeakyRelu, Activation::Sigmoid, &mut rng(7)).unwrap();
        let ck = NetCheckpoint::of(&net);
        let json = serde_json::to_string(&ck).unwrap();
        let back: NetCheckpoint = serde_json::from_str(&json).unwrap();
        assert_eq!(back.restore().unwrap(), net);
        let mut bytes = Vec::new();
        ck.write_binary(&mut bytes).unwrap();
        assert_eq!(NetCheckpoint::read_binary(bytes.as_slice()).unwrap(), ck);
    }
}
