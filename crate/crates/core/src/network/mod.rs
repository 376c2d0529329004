//! Multilayer perceptron: parameters, feed-forward, training and persistence.
//!
//! Each layer computes `a = f(x·W + b)` with `x` a row vector, `W` of shape
//! `in_dim x out_dim` and `f` the layer's [`Activation`]. The output of the
//! last layer is passed through a softmax to give class probabilities.

mod persist;
pub mod train;

use std::collections::BTreeMap;

use thiserror::Error;

use crate::activations::{Activation, ActivationError};
use crate::data::Dataset;
use crate::linalg::{self, gemm, LinalgError, Matrix, Op};
use crate::rng::{stream, SplitMix64};

pub use persist::{ModelFileError, FORMAT_VERSION, MODEL_MAGIC};
pub use train::{
    loss_and_gradients, softmax_cross_entropy, train, train_with_progress, Adam, LayerGrads, TrainConfig, TrainOutcome, Trainer,
};
pub(crate) use train::{backward, forward_train, LayerTape};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum NetworkError {
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error(transparent)]
    Activation(#[from] ActivationError),
    #[error("layer {layer}: expected input width {expected}, found {found}")]
    DimChain { layer: usize, expected: usize, found: usize },
    #[error("layer {layer}: bias has {found} entries, expected {expected}")]
    BiasLength { layer: usize, expected: usize, found: usize },
    #[error("input has {found} values, model expects {expected}")]
    InputWidth { expected: usize, found: usize },
    #[error("model has no layers")]
    NoLayers,
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("{0} labels for {1} samples")]
    LabelCount(usize, usize),
    #[error("label {label} out of range for {classes} classes")]
    LabelRange { label: usize, classes: usize },
    #[error("training diverged in epoch {epoch}: loss is {loss}")]
    Diverged { epoch: usize, loss: f64 },
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("cut {cut} out of range for a {layers}-layer model")]
    BadCut { cut: usize, layers: usize },
}

pub type Result<T, E = NetworkError> = std::result::Result<T, E>;

/// One dense layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub weights: Matrix,
    pub bias: Vec<f64>,
    pub activation: Activation,
}

impl LayerParams {
    pub fn new(weights: Matrix, bias: Vec<f64>, activation: Activation) -> Result<Self> {
        if bias.len() != weights.cols() {
            return Err(NetworkError::BiasLength {
                layer: 0,
                expected: weights.cols(),
                found: bias.len(),
            });
        }
        if let Some(index) = bias.iter().position(|b| !b.is_finite()) {
            return Err(LinalgError::NonFinite { index }.into());
        }
        Ok(Self { weights, bias, activation })
    }

    /// Glorot-uniform weights in `±sqrt(6 / (in + out))`, zero bias.
    ///
    /// Ramp layers with threshold `v < 1` use `v` times that range: a ramp is
    /// `v · r(z / v)` for the unit ramp `r`, and the scaled draw puts the
    /// initial pre-activations in the same position relative to the band.
    pub fn glorot(in_dim: usize, out_dim: usize, activation: Activation, rng: &mut SplitMix64) -> Self {
        let mut limit = (6.0 / (in_dim + out_dim) as f64).sqrt();
        if let Activation::Ramp { threshold } = activation {
            limit *= threshold.min(1.0);
        }
        let weights = Matrix::from_fn(in_dim, out_dim, |_, _| rng.uniform(-limit, limit));
        Self {
            weights,
            bias: vec![0.0; out_dim],
            activation,
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weights.rows()
    }

    pub fn out_dim(&self) -> usize {
        self.weights.cols()
    }

    /// `x·W + b`.
    pub fn pre_activation(&self, x: &[f64]) -> Result<Vec<f64>> {
        let mut z = linalg::vec_mat(x, &self.weights)?;
        z.iter_mut().zip(&self.bias).for_each(|(z, b)| *z += b);
        Ok(z)
    }

    /// `f(x·W + b)`.
    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        let mut z = self.pre_activation(x)?;
        self.activation.apply_in_place(&mut z);
        Ok(z)
    }

    /// Batched forward: rows of `x` are samples.
    pub fn forward_batch(&self, x: &Matrix) -> Result<Matrix> {
        let mut z = self.pre_activation_batch(x)?;
        self.activation.apply_in_place(z.as_mut_slice());
        Ok(z)
    }

    pub(crate) fn pre_activation_batch(&self, x: &Matrix) -> Result<Matrix> {
        let mut z = Matrix::zeros(x.rows(), self.out_dim());
        gemm(1.0, x, Op::N, &self.weights, Op::N, 0.0, &mut z)?;
        for r in 0..z.rows() {
            z.row_mut(r).iter_mut().zip(&self.bias).for_each(|(z, b)| *z += b);
        }
        Ok(z)
    }
}

/// Layer widths and activations, input first.
#[derive(Debug, Clone, PartialEq)]
pub struct Architecture {
    pub input_dim: usize,
    pub layers: Vec<(usize, Activation)>,
}

impl Architecture {
    /// `hidden` layers of `hidden_activation` followed by a linear output layer.
    pub fn mlp(input_dim: usize, hidden: &[usize], hidden_activation: Activation, classes: usize) -> Self {
        let mut layers: Vec<_> = hidden.iter().map(|&w| (w, hidden_activation)).collect();
        layers.push((classes, Activation::Linear));
        Self { input_dim, layers }
    }

    /// 784-128-128-128-10.
    pub fn desk_mnist(hidden_activation: Activation) -> Self {
        Self::mlp(784, &[128, 128, 128], hidden_activation, 10)
    }

    /// 784-800-800-800-10.
    pub fn paper_mnist(hidden_activation: Activation) -> Self {
        Self::mlp(784, &[800, 800, 800], hidden_activation, 10)
    }

    /// Replaces the activation of the first layer.
    pub fn with_first_activation(mut self, activation: Activation) -> Self {
        if let Some(first) = self.layers.first_mut() {
            first.1 = activation;
        }
        self
    }

    pub fn widths(&self) -> Vec<usize> {
        std::iter::once(self.input_dim).chain(self.layers.iter().map(|l| l.0)).collect()
    }
}

/// Ordered stack of layers plus free-form string metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpModel {
    input_dim: usize,
    layers: Vec<LayerParams>,
    metadata: BTreeMap<String, String>,
}

/// Intermediate values of one feed-forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardPass {
    /// Output of every layer, first layer first (before the softmax).
    pub activations: Vec<Vec<f64>>,
    pub probabilities: Vec<f64>,
}

impl MlpModel {
    pub fn new(input_dim: usize, layers: Vec<LayerParams>) -> Result<Self> {
        if layers.is_empty() {
            return Err(NetworkError::NoLayers);
        }
        let mut width = input_dim;
        for (i, layer) in layers.iter().enumerate() {
            if layer.in_dim() != width {
                return Err(NetworkError::DimChain {
                    layer: i,
                    expected: width,
                    found: layer.in_dim(),
                });
            }
            if layer.bias.len() != layer.out_dim() {
                return Err(NetworkError::BiasLength {
                    layer: i,
                    expected: layer.out_dim(),
                    found: layer.bias.len(),
                });
            }
            width = layer.out_dim();
        }
        Ok(Self {
            input_dim,
            layers,
            metadata: BTreeMap::new(),
        })
    }

    /// Fresh model with Glorot-initialized weights drawn from `seed`.
    pub fn init(arch: &Architecture, seed: u64) -> Result<Self> {
        let mut width = arch.input_dim;
        let mut layers = Vec::with_capacity(arch.layers.len());
        for (i, &(out, activation)) in arch.layers.iter().enumerate() {
            let mut rng = SplitMix64::derived(seed, &[stream::INIT, i as u64]);
            layers.push(LayerParams::glorot(width, out, activation, &mut rng));
            width = out;
        }
        Self::new(arch.input_dim, layers)
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(self.input_dim, LayerParams::out_dim)
    }

    pub fn layers(&self) -> &[LayerParams] {
        &self.layers
    }

    pub(crate) fn layers_mut(&mut self) -> &mut [LayerParams] {
        &mut self.layers
    }

    pub fn metadata(&self) -> &BTreeMap<String, String> {
        &self.metadata
    }

    pub fn set_metadata(&mut self, key: impl Into<String>, value: impl Into<String>) {
        self.metadata.insert(key.into(), value.into());
    }

    pub fn architecture(&self) -> Architecture {
        Architecture {
            input_dim: self.input_dim,
            layers: self.layers.iter().map(|l| (l.out_dim(), l.activation)).collect(),
        }
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.input_dim {
            return Err(NetworkError::InputWidth {
                expected: self.input_dim,
                found: x.len(),
            });
        }
        Ok(())
    }

    /// Output of the last layer, without the softmax.
    pub fn forward_raw(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_input(x)?;
        let mut a = x.to_vec();
        for layer in &self.layers {
            a = layer.forward(&a)?;
        }
        Ok(a)
    }

    pub fn forward(&self, x: &[f64]) -> Result<ForwardPass> {
        self.check_input(x)?;
        let mut activations: Vec<Vec<f64>> = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let a = layer.forward(activations.last().map_or(x, Vec::as_slice))?;
            activations.push(a);
        }
        let probabilities = softmax(activations.last().expect("model has layers"));
        Ok(ForwardPass {
            activations,
            probabilities,
        })
    }

    /// Class probabilities for one sample.
    pub fn predict(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(softmax(&self.forward_raw(x)?))
    }

    /// Batched raw forward; rows are samples.
    pub fn forward_batch_raw(&self, xs: &Matrix) -> Result<Matrix> {
        if xs.cols() != self.input_dim {
            return Err(NetworkError::InputWidth {
                expected: self.input_dim,
                found: xs.cols(),
            });
        }
        let mut iter = self.layers.iter();
        let first = iter.next().ok_or(NetworkError::NoLayers)?;
        let mut a = first.forward_batch(xs)?;
        for layer in iter {
            a = layer.forward_batch(&a)?;
        }
        Ok(a)
    }

    /// Batched class probabilities.
    pub fn forward_batch(&self, xs: &Matrix) -> Result<Matrix> {
        let mut out = self.forward_batch_raw(xs)?;
        for r in 0..out.rows() {
            softmax_in_place(out.row_mut(r));
        }
        Ok(out)
    }

    /// Splits into the first `cut` layers and the rest.
    pub fn split_at(&self, cut: usize) -> Result<(MlpModel, MlpModel)> {
        if cut == 0 || cut >= self.layers.len() {
            return Err(NetworkError::BadCut {
                cut,
                layers: self.layers.len(),
            });
        }
        let front = MlpModel::new(self.input_dim, self.layers[..cut].to_vec())?;
        let rear = MlpModel::new(self.layers[cut - 1].out_dim(), self.layers[cut..].to_vec())?;
        Ok((front, rear))
    }

    /// Rounds every parameter to `f32` precision, as the model file does.
    pub fn quantized(&self) -> MlpModel {
        let mut out = self.clone();
        for layer in &mut out.layers {
            layer.weights.as_mut_slice().iter_mut().for_each(|w| *w = *w as f32 as f64);
            layer.bias.iter_mut().for_each(|b| *b = *b as f32 as f64);
        }
        out
    }
}

/// Numerically stable softmax.
pub fn softmax(z: &[f64]) -> Vec<f64> {
    let mut out = z.to_vec();
    softmax_in_place(&mut out);
    out
}

pub fn softmax_in_place(z: &mut [f64]) {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in z.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    z.iter_mut().for_each(|v| *v /= sum);
}

/// Index of the largest entry; the first one wins ties.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

const EVAL_CHUNK: usize = 1000;

/// Fraction of samples whose argmax prediction equals the label.
pub fn evaluate(model: &MlpModel, data: &Dataset) -> Result<f64> {
    Ok(count_correct(model, data.images(), data.labels())? as f64 / data.len() as f64)
}

pub(crate) fn count_correct(model: &MlpModel, images: &Matrix, labels: &[usize]) -> Result<usize> {
    if labels.is_empty() {
        return Err(NetworkError::EmptyDataset);
    }
    let mut correct = 0;
    for start in (0..labels.len()).step_by(EVAL_CHUNK) {
        let end = (start + EVAL_CHUNK).min(labels.len());
        let idx: Vec<usize> = (start..end).collect();
        let out = model.forward_batch_raw(&images.select_rows(&idx))?;
        correct += (0..out.rows()).filter(|&r| argmax(out.row(r)) == labels[start + r]).count();
    }
    Ok(correct)
}
