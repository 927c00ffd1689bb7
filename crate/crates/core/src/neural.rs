//! Small feed-forward networks with exact reverse-mode gradients.
//!
//! Used for the client correction maps and the server transition model.
//! Parameters are plain values: clone to share, mutate only from the owner.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, NetError};
use crate::linalg::{vadd, Mat};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Tanh,
    Relu,
    Identity,
}

impl Activation {
    #[inline]
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Tanh => z.tanh(),
            Activation::Relu => z.max(0.0),
            Activation::Identity => z,
        }
    }

    /// Derivative expressed through the pre-activation `z` and output `a`.
    #[inline]
    fn derivative(self, z: f64, a: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - a * a,
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Identity => 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub width: usize,
    pub activation: Activation,
}

/// Architecture: input width followed by the layer stack.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetSpec {
    pub input: usize,
    pub layers: Vec<LayerSpec>,
}

impl NetSpec {
    /// `input → hidden (tanh) → output (identity)`, or a single linear
    /// layer when `hidden == 0`.
    pub fn mlp(input: usize, hidden: usize, output: usize) -> Self {
        let mut layers = Vec::new();
        if hidden > 0 {
            layers.push(LayerSpec {
                width: hidden,
                activation: Activation::Tanh,
            });
        }
        layers.push(LayerSpec {
            width: output,
            activation: Activation::Identity,
        });
        Self { input, layers }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    /// `out × in`.
    pub weight: Mat,
    pub bias: Vec<f64>,
    pub activation: Activation,
}

/// Network parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Net {
    pub layers: Vec<Layer>,
}

/// Parameter-shaped gradient buffers.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub weights: Vec<Mat>,
    pub biases: Vec<Vec<f64>>,
}

impl Gradients {
    pub fn zeros_like(net: &Net) -> Self {
        Self {
            weights: net
                .layers
                .iter()
                .map(|l| Mat::zeros(l.weight.rows(), l.weight.cols()))
                .collect(),
            biases: net.layers.iter().map(|l| vec![0.0; l.bias.len()]).collect(),
        }
    }

    pub fn flat(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for (w, b) in self.weights.iter().zip(&self.biases) {
            out.extend_from_slice(w.data());
            out.extend_from_slice(b);
        }
        out
    }

    pub fn is_zero(&self) -> bool {
        self.flat().iter().all(|&g| g == 0.0)
    }

    /// `self += s · other`.
    pub fn add_scaled(&mut self, other: &Gradients, s: f64) {
        for (w, ow) in self.weights.iter_mut().zip(&other.weights) {
            for (a, b) in w.data_mut().iter_mut().zip(ow.data()) {
                *a += s * b;
            }
        }
        for (bias, ob) in self.biases.iter_mut().zip(&other.biases) {
            for (a, b) in bias.iter_mut().zip(ob) {
                *a += s * b;
            }
        }
    }
}

/// Cached per-layer values of one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace {
    pub input: Vec<f64>,
    pub pre_activations: Vec<Vec<f64>>,
    pub activations: Vec<Vec<f64>>,
}

impl ForwardTrace {
    pub fn output(&self) -> &[f64] {
        self.activations.last().map_or(&self.input, Vec::as_slice)
    }
}

impl Net {
    /// Glorot-uniform weights `U(−s, s)`, `s = √(6/(fan_in+fan_out))`; zero biases.
    pub fn init(spec: &NetSpec, seed: u64) -> Result<Self, NetError> {
        if spec.layers.is_empty() {
            return Err(NetError::EmptySpec);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut fan_in = spec.input;
        let mut layers = Vec::with_capacity(spec.layers.len());
        for ls in &spec.layers {
            let s = (6.0 / (fan_in + ls.width) as f64).sqrt();
            let data = (0..fan_in * ls.width).map(|_| rng.random_range(-s..s)).collect();
            layers.push(Layer {
                weight: Mat::from_vec(ls.width, fan_in, data).expect("sized"),
                bias: vec![0.0; ls.width],
                activation: ls.activation,
            });
            fan_in = ls.width;
        }
        Ok(Self { layers })
    }

    /// Same architecture with every parameter zero.
    pub fn zeros(spec: &NetSpec) -> Result<Self, NetError> {
        let mut net = Self::init(spec, 0)?;
        for l in &mut net.layers {
            l.weight = Mat::zeros(l.weight.rows(), l.weight.cols());
        }
        Ok(net)
    }

    /// A single identity-activation layer with `W = I`, `b = 0`.
    pub fn identity(dim: usize) -> Self {
        Self {
            layers: vec![Layer {
                weight: Mat::identity(dim),
                bias: vec![0.0; dim],
                activation: Activation::Identity,
            }],
        }
    }

    pub fn input_dim(&self) -> usize {
        self.layers.first().map_or(0, |l| l.weight.cols())
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.weight.rows())
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.weight.data().len() + l.bias.len()).sum()
    }

    pub fn flat_params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for l in &self.layers {
            out.extend_from_slice(l.weight.data());
            out.extend_from_slice(&l.bias);
        }
        out
    }

    /// Overwrites parameters from the layout produced by [`Net::flat_params`].
    pub fn set_flat_params(&mut self, flat: &[f64]) {
        assert_eq!(flat.len(), self.param_count());
        let mut it = flat.iter().copied();
        for l in &mut self.layers {
            for w in l.weight.data_mut() {
                *w = it.next().unwrap();
            }
            for b in &mut l.bias {
                *b = it.next().unwrap();
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.flat_params().iter().all(|v| v.is_finite())
    }

    pub fn forward(&self, input: &[f64]) -> Result<(Vec<f64>, ForwardTrace), NetError> {
        let mut pre_activations = Vec::with_capacity(self.layers.len());
        let mut activations = Vec::with_capacity(self.layers.len());
        let mut cur = input.to_vec();
        for (i, l) in self.layers.iter().enumerate() {
            if l.weight.cols() != cur.len() {
                return Err(NetError::Dimension {
                    layer: i,
                    expected: l.weight.cols(),
                    found: cur.len(),
                });
            }
            let z = vadd(&l.weight.matvec(&cur).expect("checked"), &l.bias);
            let a: Vec<f64> = z.iter().map(|&v| l.activation.apply(v)).collect();
            pre_activations.push(z);
            activations.push(a.clone());
            cur = a;
        }
        let trace = ForwardTrace {
            input: input.to_vec(),
            pre_activations,
            activations,
        };
        Ok((cur, trace))
    }

    /// Gradients of `⟨upstream, output⟩` w.r.t. parameters and input.
    pub fn backward(&self, trace: &ForwardTrace, upstream: &[f64]) -> Result<(Gradients, Vec<f64>), NetError> {
        if trace.activations.len() != self.layers.len() {
            return Err(NetError::TraceMismatch {
                trace: trace.activations.len(),
                params: self.layers.len(),
            });
        }
        let last = self.layers.len() - 1;
        if upstream.len() != self.output_dim() {
            return Err(NetError::Dimension {
                layer: last,
                expected: self.output_dim(),
                found: upstream.len(),
            });
        }
        let mut grads = Gradients::zeros_like(self);
        let mut delta_out = upstream.to_vec();
        for i in (0..self.layers.len()).rev() {
            let l = &self.layers[i];
            let z = &trace.pre_activations[i];
            let a = &trace.activations[i];
            if z.len() != l.bias.len() {
                return Err(NetError::TraceMismatch {
                    trace: z.len(),
                    params: l.bias.len(),
                });
            }
            let delta: Vec<f64> = delta_out
                .iter()
                .zip(z.iter().zip(a))
                .map(|(&d, (&zv, &av))| d * l.activation.derivative(zv, av))
                .collect();
            let layer_input = if i == 0 { &trace.input } else { &trace.activations[i - 1] };
            let gw = &mut grads.weights[i];
            for (r, &dr) in delta.iter().enumerate() {
                for (c, &xc) in layer_input.iter().enumerate() {
                    gw[(r, c)] = dr * xc;
                }
            }
            grads.biases[i].copy_from_slice(&delta);
            delta_out = l.weight.tr_matvec(&delta).expect("sized");
        }
        Ok((grads, delta_out))
    }

    /// `θ ← θ − lr·g`; rejects the whole update if any gradient is non-finite.
    pub fn sgd_step(&mut self, grads: &Gradients, lr: f64) -> Result<(), NetError> {
        if !(lr >= 0.0 && lr.is_finite()) {
            return Err(NetError::BadLearningRate(lr));
        }
        for (i, (w, b)) in grads.weights.iter().zip(&grads.biases).enumerate() {
            if !w.is_finite() || b.iter().any(|v| !v.is_finite()) {
                return Err(NetError::NonFiniteGradient { layer: i });
            }
        }
        if lr == 0.0 {
            return Ok(());
        }
        for (l, (gw, gb)) in self.layers.iter_mut().zip(grads.weights.iter().zip(&grads.biases)) {
            for (p, g) in l.weight.data_mut().iter_mut().zip(gw.data()) {
                *p -= lr * g;
            }
            for (p, g) in l.bias.iter_mut().zip(gb) {
                *p -= lr * g;
            }
        }
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), Error> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(&Checkpoint::from(self)).expect("serializable");
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, Error> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let ck: Checkpoint = serde_json::from_str(&text).map_err(|e| Error::format(path, e))?;
        ck.into_net().map_err(|m| Error::format(path, m))
    }
}

/// On-disk form: layer dims plus row-major floats.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub layers: Vec<CheckpointLayer>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointLayer {
    pub inputs: usize,
    pub outputs: usize,
    pub activation: Activation,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl From<&Net> for Checkpoint {
    fn from(net: &Net) -> Self {
        Self {
            layers: net
                .layers
                .iter()
                .map(|l| CheckpointLayer {
                    inputs: l.weight.cols(),
                    outputs: l.weight.rows(),
                    activation: l.activation,
                    weight: l.weight.data().to_vec(),
                    bias: l.bias.clone(),
                })
                .collect(),
        }
    }
}

impl Checkpoint {
    pub fn into_net(self) -> Result<Net, String> {
        let mut layers = Vec::with_capacity(self.layers.len());
        let mut prev: Option<usize> = None;
        for (i, l) in self.layers.into_iter().enumerate() {
            if prev.is_some_and(|p| p != l.inputs) {
                return Err(format!("layer {i}: input width {} does not chain", l.inputs));
            }
            if l.bias.len() != l.outputs {
                return Err(format!("layer {i}: bias length {} != {}", l.bias.len(), l.outputs));
            }
            let weight = Mat::from_vec(l.outputs, l.inputs, l.weight).map_err(|e| format!("layer {i}: {e}"))?;
            prev = Some(l.outputs);
            layers.push(Layer {
                weight,
                bias: l.bias,
                activation: l.activation,
            });
        }
        if layers.is_empty() {
            return Err("checkpoint has no layers".into());
        }
        Ok(Net { layers })
    }
}
