//! A small stack of linear maps with elementwise nonlinearities, standing in
//! for a transformer at desk scale. Each layer carries two named weights
//! (`attn`, `mlp`) applied in sequence, each followed by the activation.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::compressor::LowRankFactors;
use crate::error::{Error, Result};
use crate::io::{read_matrix, write_atomic, write_matrix};
use crate::linalg::{random_orthonormal, seeded_rng, Matrix, SeededRng};

pub const DEFAULT_WEIGHT_NAMES: [&str; 2] = ["attn", "mlp"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Tanh,
    Identity,
}

impl Activation {
    #[inline]
    pub fn apply(self, v: f64) -> f64 {
        match self {
            Activation::Tanh => v.tanh(),
            Activation::Identity => v,
        }
    }

    /// Derivative expressed through the activation output.
    #[inline]
    fn derivative_from_output(self, out: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - out * out,
            Activation::Identity => 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WeightMatrix {
    /// `d_out × n`; the layer computes `X · wᵀ`.
    pub w: Matrix,
    pub layer: usize,
    pub name: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub weights: Vec<WeightMatrix>,
}

/// Anything that maps a `tokens × input_dim` batch to an output batch.
pub trait Network {
    fn output(&self, x: &Matrix) -> Result<Matrix>;
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyModel {
    layers: Vec<Layer>,
    activation: Activation,
    input_dim: usize,
    hidden_dim: usize,
}

/// JSON model description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub layers: usize,
    pub input_dim: usize,
    pub hidden_dim: usize,
    #[serde(default)]
    pub activation: Activation,
    #[serde(default)]
    pub seed: u64,
    /// Per-layer singular-value decay rates are drawn uniformly from this range.
    #[serde(default = "default_decay")]
    pub spectral_decay: [f64; 2],
    /// Directory holding a weight manifest; overrides random initialization.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weights: Option<std::path::PathBuf>,
}

fn default_decay() -> [f64; 2] {
    [0.5, 5.0]
}

impl ModelSpec {
    pub fn new(layers: usize, input_dim: usize, hidden_dim: usize, seed: u64) -> Self {
        Self {
            layers,
            input_dim,
            hidden_dim,
            activation: Activation::Tanh,
            seed,
            spectral_decay: default_decay(),
            weights: None,
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("model spec {}: {e}", path.display())))
    }

    pub fn build(&self) -> Result<ToyModel> {
        if self.layers == 0 || self.input_dim == 0 || self.hidden_dim == 0 {
            return Err(Error::Config(
                "model spec needs at least one layer and nonzero dimensions".into(),
            ));
        }
        let [lo, hi] = self.spectral_decay;
        if !(lo >= 0.0 && hi >= lo && hi.is_finite()) {
            return Err(Error::Config(format!(
                "spectral_decay must satisfy 0 <= lo <= hi, got [{lo}, {hi}]"
            )));
        }
        let model = match &self.weights {
            Some(dir) => ToyModel::load_weights(dir, self.activation)?,
            None => ToyModel::random(self, &mut seeded_rng(self.seed)),
        };
        if model.input_dim != self.input_dim || model.hidden_dim != self.hidden_dim {
            return Err(Error::Config(format!(
                "stored weights are {}->{}, spec says {}->{}",
                model.input_dim, model.hidden_dim, self.input_dim, self.hidden_dim
            )));
        }
        Ok(model)
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct WeightManifestEntry {
    layer: usize,
    name: String,
    file: String,
    rows: usize,
    cols: usize,
}

impl ToyModel {
    /// Validates that consecutive weights chain.
    pub fn new(layers: Vec<Layer>, activation: Activation) -> Result<Self> {
        let first = layers
            .first()
            .and_then(|l| l.weights.first())
            .ok_or_else(|| Error::Contract("model needs at least one layer with a weight".into()))?;
        let input_dim = first.w.cols();
        let mut dim = input_dim;
        for (l, layer) in layers.iter().enumerate() {
            if layer.weights.is_empty() {
                return Err(Error::Contract(format!("layer {l} has no weights")));
            }
            for w in &layer.weights {
                if w.w.cols() != dim {
                    return Err(Error::shape(
                        format!("layer {l} weight {}", w.name),
                        format!("{dim} input columns"),
                        format!("{}x{}", w.w.rows(), w.w.cols()),
                    ));
                }
                dim = w.w.rows();
            }
        }
        Ok(Self {
            layers,
            activation,
            input_dim,
            hidden_dim: dim,
        })
    }

    /// Random weights with planted decaying spectra, one decay rate per layer.
    pub fn random(spec: &ModelSpec, rng: &mut SeededRng) -> Self {
        use rand::Rng;
        let [lo, hi] = spec.spectral_decay;
        let mut layers = Vec::with_capacity(spec.layers);
        let mut dim = spec.input_dim;
        for l in 0..spec.layers {
            let decay = if hi > lo { rng.random_range(lo..hi) } else { lo };
            let weights = DEFAULT_WEIGHT_NAMES
                .iter()
                .map(|name| {
                    let w = planted_weight(spec.hidden_dim, dim, decay, rng);
                    dim = spec.hidden_dim;
                    WeightMatrix {
                        w,
                        layer: l,
                        name: name.to_string(),
                    }
                })
                .collect();
            layers.push(Layer { weights });
        }
        Self::new(layers, spec.activation).expect("random model chains by construction")
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layer_count(&self) -> usize {
        self.layers.len()
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn hidden_dim(&self) -> usize {
        self.hidden_dim
    }

    /// Weights in forward order.
    pub fn weights(&self) -> impl Iterator<Item = &WeightMatrix> {
        self.layers.iter().flat_map(|l| l.weights.iter())
    }

    pub fn weight_count(&self) -> usize {
        self.weights().count()
    }

    pub fn parameter_count(&self) -> usize {
        self.weights().map(|w| w.w.rows() * w.w.cols()).sum()
    }

    pub fn weights_mut(&mut self) -> impl Iterator<Item = &mut WeightMatrix> {
        self.layers.iter_mut().flat_map(|l| l.weights.iter_mut())
    }

    fn check_input(&self, x: &Matrix) -> Result<()> {
        if x.cols() != self.input_dim {
            return Err(Error::shape(
                "layer 0 input",
                format!("{} channels", self.input_dim),
                format!("{} channels", x.cols()),
            ));
        }
        Ok(())
    }

    /// Output and post-activation hidden state of every layer.
    pub fn forward(&self, x: &Matrix) -> Result<(Matrix, Vec<Matrix>)> {
        let pass = self.forward_pass(x, false)?;
        let output = pass.hidden.last().cloned().expect("at least one layer");
        Ok((output, pass.hidden))
    }

    /// Forward pass that also records the exact input of every weight.
    pub(crate) fn forward_pass(&self, x: &Matrix, capture: bool) -> Result<ForwardPass> {
        self.check_input(x)?;
        let mut inputs = Vec::new();
        let mut outputs = Vec::new();
        let mut hidden = Vec::with_capacity(self.layers.len());
        let mut h = x.clone();
        for layer in &self.layers {
            for w in &layer.weights {
                let z = h.matmul_t(&w.w)?;
                let a = z.map(|v| self.activation.apply(v));
                if capture {
                    inputs.push(std::mem::replace(&mut h, a));
                    outputs.push(h.clone());
                } else {
                    h = a;
                }
            }
            hidden.push(h.clone());
        }
        Ok(ForwardPass {
            inputs,
            outputs,
            hidden,
        })
    }

    pub fn save_weights(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut manifest = Vec::new();
        for w in self.weights() {
            let file = format!("layer{}_{}.dsvd", w.layer, w.name);
            write_matrix(&w.w, &dir.join(&file))?;
            manifest.push(WeightManifestEntry {
                layer: w.layer,
                name: w.name.clone(),
                file,
                rows: w.w.rows(),
                cols: w.w.cols(),
            });
        }
        let json = serde_json::to_vec_pretty(&manifest)?;
        write_atomic(&dir.join("weights.json"), &json)
    }

    pub fn load_weights(dir: &Path, activation: Activation) -> Result<Self> {
        let path = dir.join("weights.json");
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let entries: Vec<WeightManifestEntry> = serde_json::from_str(&text)?;
        let mut layers: Vec<Layer> = Vec::new();
        for e in entries {
            let w = read_matrix(&dir.join(&e.file))?;
            if w.shape() != (e.rows, e.cols) {
                return Err(Error::shape(
                    e.file.clone(),
                    format!("{}x{}", e.rows, e.cols),
                    format!("{}x{}", w.rows(), w.cols()),
                ));
            }
            while layers.len() <= e.layer {
                layers.push(Layer {
                    weights: Vec::new(),
                });
            }
            layers[e.layer].weights.push(WeightMatrix {
                w,
                layer: e.layer,
                name: e.name,
            });
        }
        Self::new(layers, activation)
    }
}

pub(crate) struct ForwardPass {
    /// Input of each weight, forward order (only when capturing).
    pub inputs: Vec<Matrix>,
    /// Post-activation output of each weight (only when capturing).
    pub outputs: Vec<Matrix>,
    pub hidden: Vec<Matrix>,
}

impl Network for ToyModel {
    fn output(&self, x: &Matrix) -> Result<Matrix> {
        Ok(self.forward(x)?.0)
    }
}

/// `Q₁ · diag(s) · Q₂ᵀ` with `s_i ∝ exp(-decay · i / r)`, RMS of `s` equal to 1.
fn planted_weight(rows: usize, cols: usize, decay: f64, rng: &mut SeededRng) -> Matrix {
    let r = rows.min(cols);
    let mut s: Vec<f64> = (0..r).map(|i| (-decay * i as f64 / r as f64).exp()).collect();
    let rms = (s.iter().map(|v| v * v).sum::<f64>() / r as f64).sqrt();
    s.iter_mut().for_each(|v| *v /= rms);
    let q1 = random_orthonormal(rows, r, rng);
    let q2 = random_orthonormal(cols, r, rng);
    q1.scale_columns(&s)
        .and_then(|m| m.matmul_t(&q2))
        .expect("planted factors chain")
}

/// Mean squared error between the model output and `target`.
pub fn scalar_loss(model: &impl Network, x: &Matrix, target: &Matrix) -> Result<f64> {
    let out = model.output(x)?;
    mse(&out, target)
}

pub(crate) fn mse(out: &Matrix, target: &Matrix) -> Result<f64> {
    if out.shape() != target.shape() {
        return Err(Error::shape(
            "loss target",
            format!("{}x{}", out.rows(), out.cols()),
            format!("{}x{}", target.rows(), target.cols()),
        ));
    }
    let n = out.as_slice().len().max(1) as f64;
    let sum: f64 = out
        .as_slice()
        .iter()
        .zip(target.as_slice())
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    Ok(sum / n)
}

/// `∂loss/∂w` for every weight, same order and shapes as [`ToyModel::weights`].
#[derive(Debug, Clone)]
pub struct GradientSet {
    pub grads: Vec<Matrix>,
}

/// Backpropagated gradients of the mean-squared-error loss.
pub fn gradients(model: &ToyModel, x: &Matrix, target: &Matrix) -> Result<GradientSet> {
    let pass = model.forward_pass(x, true)?;
    let out = pass.outputs.last().expect("at least one weight");
    if out.shape() != target.shape() {
        return Err(Error::shape(
            "loss target",
            format!("{}x{}", out.rows(), out.cols()),
            format!("{}x{}", target.rows(), target.cols()),
        ));
    }
    let n = out.as_slice().len() as f64;
    let mut upstream = out.sub(target)?.scale(2.0 / n);
    let weights: Vec<&WeightMatrix> = model.weights().collect();
    let act = model.activation();
    let mut grads = vec![Matrix::zeros(0, 0); weights.len()];
    for k in (0..weights.len()).rev() {
        let a_out = &pass.outputs[k];
        let dz = Matrix::from_fn(a_out.rows(), a_out.cols(), |i, j| {
            upstream[(i, j)] * act.derivative_from_output(a_out[(i, j)])
        });
        grads[k] = dz.t_matmul(&pass.inputs[k])?;
        if k > 0 {
            upstream = dz.matmul(&weights[k].w)?;
        }
    }
    Ok(GradientSet { grads })
}

/// Cosine similarity of the flattened outputs of two networks on `x`.
pub fn cosine_output_similarity(a: &dyn Network, b: &dyn Network, x: &Matrix) -> Result<f64> {
    let oa = a.output(x)?;
    let ob = b.output(x)?;
    cosine_similarity(&oa, &ob)
}

pub fn cosine_similarity(a: &Matrix, b: &Matrix) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::shape(
            "cosine similarity",
            format!("{}x{}", a.rows(), a.cols()),
            format!("{}x{}", b.rows(), b.cols()),
        ));
    }
    let na = a.frobenius_norm();
    let nb = b.frobenius_norm();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::UndefinedSimilarity("zero-norm output".into()));
    }
    let dot: f64 = a
        .as_slice()
        .iter()
        .zip(b.as_slice())
        .map(|(x, y)| (x / na) * (y / nb))
        .sum();
    Ok(dot.clamp(-1.0, 1.0))
}

/// One weight of a compressed model, evaluated through its factor pair.
#[derive(Debug, Clone)]
pub struct CompressedWeight {
    pub layer: usize,
    pub name: String,
    pub factors: LowRankFactors,
}

/// Model whose weights are all replaced by low-rank factor pairs.
#[derive(Debug, Clone)]
pub struct CompressedModel {
    pub layers: Vec<Vec<CompressedWeight>>,
    pub activation: Activation,
}

impl CompressedModel {
    pub fn weights(&self) -> impl Iterator<Item = &CompressedWeight> {
        self.layers.iter().flat_map(|l| l.iter())
    }

    pub fn parameter_count(&self) -> usize {
        self.weights().map(|w| w.factors.parameter_count()).sum()
    }
}

impl Network for CompressedModel {
    fn output(&self, x: &Matrix) -> Result<Matrix> {
        let mut h = x.clone();
        for w in self.weights() {
            // (X · w_vᵀ) · w_uᵀ
            h = h
                .matmul_t(&w.factors.w_v)?
                .matmul_t(&w.factors.w_u)?
                .map(|v| self.activation.apply(v));
        }
        Ok(h)
    }
}
