//! Dense MLPs with exact reverse-mode gradients.
//!
//! Weights are stored row-major (`out × in`) so the forward dot products and
//! the weight-gradient outer products both walk memory contiguously.

mod optim;

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

pub use optim::{OptKind, Optimizer, ADAM_BETA1, ADAM_BETA2, ADAM_EPS};

use crate::error::{Error, Result};
use crate::IclRng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Tanh,
    Sigmoid,
    Identity,
}

/// Logistic function without overflow for large `|x|`.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Activation {
    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Tanh => x.tanh(),
            Activation::Sigmoid => sigmoid(x),
            Activation::Identity => x,
        }
    }

    /// Derivative expressed through the pre-activation `x` and output `y`.
    /// ReLU uses subgradient 0 at exactly 0.
    #[inline]
    pub fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - y * y,
            Activation::Sigmoid => y * (1.0 - y),
            Activation::Identity => 1.0,
        }
    }

    /// Default init gain for a layer followed by this activation.
    fn gain(self) -> f64 {
        match self {
            Activation::Relu => std::f64::consts::SQRT_2,
            _ => 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub inputs: usize,
    pub outputs: usize,
    pub activation: Activation,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Layer {
    pub fn zeros(inputs: usize, outputs: usize, activation: Activation) -> Self {
        Layer {
            inputs,
            outputs,
            activation,
            weights: vec![0.0; inputs * outputs],
            bias: vec![0.0; outputs],
        }
    }

    /// Scaled-uniform init with variance `gain² / fan_in`, zero bias.
    pub fn init(inputs: usize, outputs: usize, activation: Activation, gain: f64, rng: &mut IclRng) -> Self {
        let mut layer = Layer::zeros(inputs, outputs, activation);
        let a = gain * (3.0 / inputs as f64).sqrt();
        if a > 0.0 {
            for w in &mut layer.weights {
                *w = rng.random_range(-a..a);
            }
        }
        layer
    }

    #[inline]
    fn row(&self, j: usize) -> &[f64] {
        &self.weights[j * self.inputs..(j + 1) * self.inputs]
    }
}

/// Ordered stack of affine + activation layers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpParams {
    pub layers: Vec<Layer>,
}

/// Activations recorded by [`MlpParams::forward`], enough to run the backward pass.
#[derive(Clone, Debug)]
pub struct Tape {
    input: Vec<f64>,
    pre: Vec<Vec<f64>>,
    post: Vec<Vec<f64>>,
}

impl Tape {
    pub fn output(&self) -> &[f64] {
        self.post.last().map(|v| v.as_slice()).unwrap_or(&self.input)
    }
}

/// Parameter gradients, shape-congruent with an [`MlpParams`].
#[derive(Clone, Debug, PartialEq)]
pub struct GradBuffer {
    pub layers: Vec<(Vec<f64>, Vec<f64>)>,
}

impl MlpParams {
    /// `sizes = [in, h1, ..., out]`; hidden layers use `hidden`, the last layer
    /// `output`. The output layer's init gain is `output_gain` (0 gives zero weights).
    pub fn new(
        sizes: &[usize],
        hidden: Activation,
        output: Activation,
        output_gain: f64,
        rng: &mut IclRng,
    ) -> Result<Self> {
        if sizes.len() < 2 || sizes.contains(&0) {
            return Err(Error::Config(format!("invalid layer sizes {sizes:?}")));
        }
        let n = sizes.len() - 1;
        let layers = (0..n)
            .map(|i| {
                if i + 1 == n {
                    Layer::init(sizes[i], sizes[i + 1], output, output_gain, rng)
                } else {
                    Layer::init(sizes[i], sizes[i + 1], hidden, hidden.gain(), rng)
                }
            })
            .collect();
        Ok(MlpParams { layers })
    }

    pub fn from_layers(layers: Vec<Layer>) -> Result<Self> {
        let p = MlpParams { layers };
        p.validate()?;
        Ok(p)
    }

    pub fn input_dim(&self) -> usize {
        self.layers.first().map_or(0, |l| l.inputs)
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.outputs)
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.bias.len()).sum()
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::Config("network has no layers".into()));
        }
        for (i, l) in self.layers.iter().enumerate() {
            if l.weights.len() != l.inputs * l.outputs {
                return Err(Error::dim("layer weights", l.inputs * l.outputs, l.weights.len()));
            }
            if l.bias.len() != l.outputs {
                return Err(Error::dim("layer bias", l.outputs, l.bias.len()));
            }
            if i > 0 && self.layers[i - 1].outputs != l.inputs {
                return Err(Error::dim("layer chain", self.layers[i - 1].outputs, l.inputs));
            }
            if !l.weights.iter().chain(&l.bias).all(|v| v.is_finite()) {
                return Err(Error::NonFinite(format!("parameters of layer {i}")));
            }
        }
        Ok(())
    }

    fn check_input(&self, input: &[f64]) -> Result<()> {
        if input.len() != self.input_dim() {
            return Err(Error::dim("network input", self.input_dim(), input.len()));
        }
        Ok(())
    }

    /// Output only, no tape.
    pub fn eval(&self, input: &[f64]) -> Result<Vec<f64>> {
        self.check_input(input)?;
        let mut cur = input.to_vec();
        for l in &self.layers {
            let mut next = Vec::with_capacity(l.outputs);
            for j in 0..l.outputs {
                next.push(l.activation.apply(l.bias[j] + dot(l.row(j), &cur)));
            }
            cur = next;
        }
        Ok(cur)
    }

    pub fn forward(&self, input: &[f64]) -> Result<(Vec<f64>, Tape)> {
        self.check_input(input)?;
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut post: Vec<Vec<f64>> = Vec::with_capacity(self.layers.len());
        for l in &self.layers {
            let x = post.last().map(|v| v.as_slice()).unwrap_or(input);
            let z: Vec<f64> = (0..l.outputs).map(|j| l.bias[j] + dot(l.row(j), x)).collect();
            let y: Vec<f64> = z.iter().map(|&v| l.activation.apply(v)).collect();
            pre.push(z);
            post.push(y);
        }
        let tape = Tape {
            input: input.to_vec(),
            pre,
            post,
        };
        Ok((tape.output().to_vec(), tape))
    }

    /// Gradient of `⟨upstream, output⟩` with respect to every parameter.
    pub fn backward(&self, tape: &Tape, upstream: &[f64]) -> Result<GradBuffer> {
        let mut grads = GradBuffer::zeros_like(self);
        self.backward_accumulate(tape, upstream, 1.0, &mut grads)?;
        Ok(grads)
    }

    /// Adds `scale · ∂⟨upstream, output⟩/∂θ` into `grads` and returns
    /// `scale · ∂⟨upstream, output⟩/∂input`.
    pub fn backward_accumulate(
        &self,
        tape: &Tape,
        upstream: &[f64],
        scale: f64,
        grads: &mut GradBuffer,
    ) -> Result<Vec<f64>> {
        self.check_tape(tape)?;
        if upstream.len() != self.output_dim() {
            return Err(Error::dim("upstream gradient", self.output_dim(), upstream.len()));
        }
        if grads.layers.len() != self.layers.len() {
            return Err(Error::dim("gradient buffer", self.layers.len(), grads.layers.len()));
        }
        let mut delta: Vec<f64> = upstream.iter().map(|u| u * scale).collect();
        for (i, l) in self.layers.iter().enumerate().rev() {
            let z = &tape.pre[i];
            let y = &tape.post[i];
            for j in 0..l.outputs {
                delta[j] *= l.activation.derivative(z[j], y[j]);
            }
            let x = if i == 0 { &tape.input } else { &tape.post[i - 1] };
            let (gw, gb) = &mut grads.layers[i];
            let mut dx = vec![0.0; l.inputs];
            for j in 0..l.outputs {
                let d = delta[j];
                if d == 0.0 {
                    continue;
                }
                gb[j] += d;
                let grow = &mut gw[j * l.inputs..(j + 1) * l.inputs];
                for (g, xi) in grow.iter_mut().zip(x) {
                    *g += d * xi;
                }
                for (dxi, w) in dx.iter_mut().zip(l.row(j)) {
                    *dxi += d * w;
                }
            }
            delta = dx;
        }
        Ok(delta)
    }

    fn check_tape(&self, tape: &Tape) -> Result<()> {
        if tape.pre.len() != self.layers.len() || tape.input.len() != self.input_dim() {
            return Err(Error::Config("tape does not match this network".into()));
        }
        for (l, z) in self.layers.iter().zip(&tape.pre) {
            if z.len() != l.outputs {
                return Err(Error::Config("tape does not match this network".into()));
            }
        }
        Ok(())
    }

    /// Flat view of all parameters, layer by layer (weights then bias).
    pub fn flat(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.num_params());
        for l in &self.layers {
            v.extend_from_slice(&l.weights);
            v.extend_from_slice(&l.bias);
        }
        v
    }

    pub fn param_mut(&mut self, mut index: usize) -> &mut f64 {
        for l in &mut self.layers {
            if index < l.weights.len() {
                return &mut l.weights[index];
            }
            index -= l.weights.len();
            if index < l.bias.len() {
                return &mut l.bias[index];
            }
            index -= l.bias.len();
        }
        panic!("parameter index out of range");
    }

    pub fn save_json(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string(self)?)?;
        Ok(())
    }

    pub fn load_json(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Load {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        let p: MlpParams = serde_json::from_str(&text)?;
        p.validate()?;
        Ok(p)
    }
}

impl GradBuffer {
    pub fn zeros_like(params: &MlpParams) -> Self {
        GradBuffer {
            layers: params
                .layers
                .iter()
                .map(|l| (vec![0.0; l.weights.len()], vec![0.0; l.bias.len()]))
                .collect(),
        }
    }

    pub fn zero(&mut self) {
        for (w, b) in &mut self.layers {
            w.fill(0.0);
            b.fill(0.0);
        }
    }

    pub fn scale(&mut self, s: f64) {
        for (w, b) in &mut self.layers {
            w.iter_mut().chain(b.iter_mut()).for_each(|v| *v *= s);
        }
    }

    pub fn add_scaled(&mut self, other: &GradBuffer, s: f64) {
        for ((w, b), (ow, ob)) in self.layers.iter_mut().zip(&other.layers) {
            for (a, o) in w.iter_mut().zip(ow) {
                *a += s * o;
            }
            for (a, o) in b.iter_mut().zip(ob) {
                *a += s * o;
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|(w, b)| w.iter().chain(b).all(|v| v.is_finite()))
    }

    pub fn flat(&self) -> Vec<f64> {
        let mut v = Vec::new();
        for (w, b) in &self.layers {
            v.extend_from_slice(w);
            v.extend_from_slice(b);
        }
        v
    }

    pub fn norm(&self) -> f64 {
        self.layers
            .iter()
            .flat_map(|(w, b)| w.iter().chain(b))
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    pub fn congruent_with(&self, params: &MlpParams) -> bool {
        self.layers.len() == params.layers.len()
            && self
                .layers
                .iter()
                .zip(&params.layers)
                .all(|((w, b), l)| w.len() == l.weights.len() && b.len() == l.bias.len())
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Numerically stable log-softmax.
pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
    logits.iter().map(|l| l - lse).collect()
}
