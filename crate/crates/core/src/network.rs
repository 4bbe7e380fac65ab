//! Dense feed-forward network with manual forward and backward passes.
//!
//! Every pass records the per-layer quantities the influence estimators
//! consume: the layer inputs `a^(l-1)`, the pre-activations `s^(l)`, and the
//! loss gradients `g^(l) = dℓ/ds^(l)`. Weight gradients are never needed to
//! score a pair, but [`param_grads`] materializes them from the taps through
//! the dense-layer outer-product identity.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum NetworkError {
    #[error("dimension mismatch in {what}: expected {expected}, found {found}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        found: usize,
    },
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("invalid architecture: {0}")]
    InvalidArchitecture(String),
    #[error("taps incomplete: {0}")]
    MissingTaps(&'static str),
    #[error("checkpoint i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint format: {0}")]
    Format(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, NetworkError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Linear,
    Relu,
    Tanh,
}

impl Activation {
    pub fn apply(self, s: f64) -> f64 {
        match self {
            Activation::Linear => s,
            Activation::Relu => s.max(0.0),
            Activation::Tanh => s.tanh(),
        }
    }

    /// Derivative at `s`; ReLU uses 0 at the kink.
    pub fn derivative(self, s: f64) -> f64 {
        match self {
            Activation::Linear => 1.0,
            Activation::Relu => {
                if s > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => {
                let t = s.tanh();
                1.0 - t * t
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub in_dim: usize,
    pub out_dim: usize,
    pub activation: Activation,
}

impl LayerSpec {
    pub fn new(in_dim: usize, out_dim: usize, activation: Activation) -> Self {
        Self {
            in_dim,
            out_dim,
            activation,
        }
    }

    pub fn num_params(&self) -> usize {
        self.out_dim * (self.in_dim + 1)
    }
}

/// One dense layer. `weights` is row-major `out_dim x in_dim`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    #[serde(flatten)]
    pub spec: LayerSpec,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Layer {
    fn affine(&self, input: &[f64]) -> Vec<f64> {
        let n = self.spec.in_dim;
        self.weights
            .chunks_exact(n)
            .zip(&self.bias)
            .map(|(row, b)| dot(row, input) + b)
            .collect()
    }

    /// `W^T v`.
    fn transpose_mul(&self, v: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.spec.in_dim];
        for (row, &vi) in self.weights.chunks_exact(self.spec.in_dim).zip(v) {
            for (o, &w) in out.iter_mut().zip(row) {
                *o += w * vi;
            }
        }
        out
    }
}

/// Layered dense network; the final layer emits logits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub seed: u64,
    layers: Vec<Layer>,
}

/// Activations and pre-activations recorded by [`Mlp::forward`].
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTaps {
    /// `a^(0) .. a^(L-1)`; `a^(0)` is the raw input.
    pub activations: Vec<Vec<f64>>,
    /// `s^(1) .. s^(L)`.
    pub pre_activations: Vec<Vec<f64>>,
}

impl ForwardTaps {
    pub fn logits(&self) -> &[f64] {
        self.pre_activations.last().map(Vec::as_slice).unwrap_or(&[])
    }

    /// `ã^(0) ‖ … ‖ ã^(L-1)`, each block with a trailing constant 1.
    pub fn augmented_stack(&self) -> Vec<f64> {
        augmented_stack(&self.activations)
    }
}

/// Softmax cross-entropy loss and its gradient with respect to the logits.
#[derive(Debug, Clone, PartialEq)]
pub struct LossGrad {
    pub loss: f64,
    pub grad: Vec<f64>,
}

/// Complete per-sample record of a forward and backward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleTaps {
    pub activations: Vec<Vec<f64>>,
    pub pre_activations: Vec<Vec<f64>>,
    /// `g^(L)`, identical to `layer_grads[L-1]`.
    pub output_grad: Vec<f64>,
    /// `g^(1) .. g^(L)`.
    pub layer_grads: Vec<Vec<f64>>,
    pub loss: f64,
}

impl SampleTaps {
    pub fn depth(&self) -> usize {
        self.layer_grads.len()
    }

    pub fn augmented_stack(&self) -> Vec<f64> {
        augmented_stack(&self.activations)
    }
}

/// Gradient of one dense layer's parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrad {
    /// Row-major `out_dim x in_dim`.
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl LayerGrad {
    pub fn dot(&self, other: &LayerGrad) -> f64 {
        dot(&self.weights, &other.weights) + dot(&self.bias, &other.bias)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamGrads {
    pub layers: Vec<LayerGrad>,
}

impl ParamGrads {
    /// Flattened in the same order as [`Mlp::flat_params`].
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for l in &self.layers {
            out.extend_from_slice(&l.weights);
            out.extend_from_slice(&l.bias);
        }
        out
    }

    pub fn same_shape(&self, other: &ParamGrads) -> bool {
        self.layers.len() == other.layers.len()
            && self.layers.iter().zip(&other.layers).all(|(a, b)| {
                a.weights.len() == b.weights.len() && a.bias.len() == b.bias.len()
            })
    }
}

impl Mlp {
    /// Builds a network with weights drawn uniformly from `±1/sqrt(in_dim)`.
    pub fn new(specs: &[LayerSpec], seed: u64) -> Result<Self> {
        validate_specs(specs)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = specs
            .iter()
            .map(|&spec| {
                let bound = 1.0 / (spec.in_dim as f64).sqrt();
                let weights = (0..spec.in_dim * spec.out_dim)
                    .map(|_| rng.random_range(-bound..=bound))
                    .collect();
                let bias = (0..spec.out_dim)
                    .map(|_| rng.random_range(-bound..=bound))
                    .collect();
                Layer {
                    spec,
                    weights,
                    bias,
                }
            })
            .collect();
        Ok(Self { seed, layers })
    }

    /// Builds a network from explicit parameters.
    pub fn from_layers(layers: Vec<Layer>, seed: u64) -> Result<Self> {
        let specs: Vec<LayerSpec> = layers.iter().map(|l| l.spec).collect();
        validate_specs(&specs)?;
        for l in &layers {
            check_len("weights", l.spec.in_dim * l.spec.out_dim, l.weights.len())?;
            check_len("bias", l.spec.out_dim, l.bias.len())?;
            if !l.weights.iter().chain(&l.bias).all(|v| v.is_finite()) {
                return Err(NetworkError::NonFinite("parameters"));
            }
        }
        Ok(Self { seed, layers })
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn specs(&self) -> Vec<LayerSpec> {
        self.layers.iter().map(|l| l.spec).collect()
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].spec.in_dim
    }

    pub fn num_classes(&self) -> usize {
        self.layers[self.layers.len() - 1].spec.out_dim
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.spec.num_params()).sum()
    }

    /// Per-layer weights then bias, layer by layer.
    pub fn flat_params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for l in &self.layers {
            out.extend_from_slice(&l.weights);
            out.extend_from_slice(&l.bias);
        }
        out
    }

    /// `θ ← θ − scale · delta`, with `delta` in [`Mlp::flat_params`] order.
    pub fn apply_step(&mut self, delta: &[f64], scale: f64) -> Result<()> {
        check_len("parameter step", self.num_params(), delta.len())?;
        let mut it = delta.iter();
        for l in &mut self.layers {
            for p in l.weights.iter_mut().chain(l.bias.iter_mut()) {
                *p -= scale * it.next().copied().unwrap_or(0.0);
            }
        }
        Ok(())
    }

    pub fn forward(&self, x: &[f64]) -> Result<ForwardTaps> {
        check_len("input", self.input_dim(), x.len())?;
        if !x.iter().all(|v| v.is_finite()) {
            return Err(NetworkError::NonFinite("input"));
        }
        let depth = self.depth();
        let mut activations = Vec::with_capacity(depth);
        let mut pre_activations = Vec::with_capacity(depth);
        let mut current = x.to_vec();
        for (idx, layer) in self.layers.iter().enumerate() {
            let s = layer.affine(&current);
            activations.push(current);
            current = if idx + 1 < depth {
                s.iter().map(|&v| layer.spec.activation.apply(v)).collect()
            } else {
                Vec::new()
            };
            pre_activations.push(s);
        }
        Ok(ForwardTaps {
            activations,
            pre_activations,
        })
    }

    /// Propagates `g^(L)` down to every layer, completing the taps.
    pub fn backward_taps(&self, fwd: ForwardTaps, out: &LossGrad) -> Result<SampleTaps> {
        let depth = self.depth();
        if fwd.activations.len() != depth || fwd.pre_activations.len() != depth {
            return Err(NetworkError::MissingTaps("forward taps do not cover every layer"));
        }
        check_len("output gradient", self.num_classes(), out.grad.len())?;
        for (layer, (a, s)) in self
            .layers
            .iter()
            .zip(fwd.activations.iter().zip(&fwd.pre_activations))
        {
            check_len("recorded activation", layer.spec.in_dim, a.len())?;
            check_len("recorded pre-activation", layer.spec.out_dim, s.len())?;
        }

        let mut layer_grads = vec![Vec::new(); depth];
        layer_grads[depth - 1] = out.grad.clone();
        for l in (1..depth).rev() {
            let upstream = self.layers[l].transpose_mul(&layer_grads[l]);
            let act = self.layers[l - 1].spec.activation;
            layer_grads[l - 1] = upstream
                .iter()
                .zip(&fwd.pre_activations[l - 1])
                .map(|(u, &s)| u * act.derivative(s))
                .collect();
        }
        Ok(SampleTaps {
            activations: fwd.activations,
            pre_activations: fwd.pre_activations,
            output_grad: out.grad.clone(),
            layer_grads,
            loss: out.loss,
        })
    }

    /// Forward, loss and backward for one labelled input.
    pub fn sample_taps(&self, x: &[f64], label: usize) -> Result<SampleTaps> {
        let fwd = self.forward(x)?;
        let out = loss_and_output_grad(fwd.logits(), label)?;
        self.backward_taps(fwd, &out)
    }

    pub fn logits(&self, x: &[f64]) -> Result<Vec<f64>> {
        let mut fwd = self.forward(x)?;
        Ok(fwd.pre_activations.pop().unwrap_or_default())
    }

    pub fn loss(&self, x: &[f64], label: usize) -> Result<f64> {
        let logits = self.logits(x)?;
        Ok(loss_and_output_grad(&logits, label)?.loss)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let raw: Mlp = serde_json::from_str(text)?;
        Mlp::from_layers(raw.layers, raw.seed)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Mlp::from_json(&fs::read_to_string(path)?)
    }
}

/// Softmax cross-entropy: `loss = −log softmax(logits)[label]`,
/// `grad = softmax(logits) − onehot(label)`.
pub fn loss_and_output_grad(logits: &[f64], label: usize) -> Result<LossGrad> {
    if label >= logits.len() {
        return Err(NetworkError::LabelOutOfRange {
            label,
            classes: logits.len(),
        });
    }
    if !logits.iter().all(|v| v.is_finite()) {
        return Err(NetworkError::NonFinite("logits"));
    }
    let (argmax, &max) = logits
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(b.1).then(b.0.cmp(&a.0)))
        .expect("nonempty logits");
    let exps: Vec<f64> = logits.iter().map(|&s| (s - max).exp()).collect();
    // The max term is exactly 1; ln_1p keeps tiny losses accurate.
    let rest: f64 = exps
        .iter()
        .enumerate()
        .filter(|&(k, _)| k != argmax)
        .map(|(_, e)| e)
        .sum();
    // Subtract the label logit before adding the tail to avoid cancellation.
    let loss = ((max - logits[label]) + rest.ln_1p()).max(0.0);
    let total = 1.0 + rest;
    let grad = exps
        .iter()
        .enumerate()
        .map(|(k, e)| {
            let p = e / total;
            if k == label {
                // p − 1 = −(sum of the other probabilities), exact for p ≈ 1.
                -(total - e) / total
            } else {
                p
            }
        })
        .collect();
    Ok(LossGrad { loss, grad })
}

/// `∇W^(l) = g^(l) a^(l−1)ᵀ`, `∇b^(l) = g^(l)`.
pub fn param_grads(taps: &SampleTaps) -> Result<ParamGrads> {
    if taps.layer_grads.len() != taps.activations.len() {
        return Err(NetworkError::MissingTaps("layer gradients not recorded"));
    }
    let layers = taps
        .layer_grads
        .iter()
        .zip(&taps.activations)
        .map(|(g, a)| LayerGrad {
            weights: g
                .iter()
                .flat_map(|&gi| a.iter().map(move |&aj| gi * aj))
                .collect(),
            bias: g.clone(),
        })
        .collect();
    Ok(ParamGrads { layers })
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn augmented_stack(activations: &[Vec<f64>]) -> Vec<f64> {
    let mut out = Vec::with_capacity(activations.iter().map(|a| a.len() + 1).sum());
    for a in activations {
        out.extend_from_slice(a);
        out.push(1.0);
    }
    out
}

fn check_len(what: &'static str, expected: usize, found: usize) -> Result<()> {
    if expected == found {
        Ok(())
    } else {
        Err(NetworkError::DimensionMismatch {
            what,
            expected,
            found,
        })
    }
}

fn validate_specs(specs: &[LayerSpec]) -> Result<()> {
    let Some(last) = specs.last() else {
        return Err(NetworkError::InvalidArchitecture("no layers".into()));
    };
    if specs.iter().any(|s| s.in_dim == 0 || s.out_dim == 0) {
        return Err(NetworkError::InvalidArchitecture(
            "layer dimensions must be positive".into(),
        ));
    }
    for (idx, pair) in specs.windows(2).enumerate() {
        if pair[0].out_dim != pair[1].in_dim {
            return Err(NetworkError::InvalidArchitecture(format!(
                "layer {} outputs {} but layer {} expects {}",
                idx + 1,
                pair[0].out_dim,
                idx + 2,
                pair[1].in_dim
            )));
        }
    }
    if last.activation != Activation::Linear {
        return Err(NetworkError::InvalidArchitecture(
            "final layer must be linear (logits)".into(),
        ));
    }
    Ok(())
}
