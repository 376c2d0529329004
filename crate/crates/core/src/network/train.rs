//! Mini-batch training: softmax cross-entropy, back-propagation, Adam and
//! inverted dropout.
//!
//! The forward and backward passes work on a contiguous slice of layers so the
//! same code runs a monolithic step and either half of a split step. Dropout
//! masks are drawn from a stream keyed by `(seed, step, global layer index)`,
//! which makes a split step reproduce the monolithic step exactly.

use crate::data::Dataset;
use crate::linalg::{gemm, Matrix, Op};
use crate::rng::{stream, SplitMix64};

use super::{softmax_in_place, LayerParams, MlpModel, NetworkError, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Dropout probability on the input of each layer; missing entries are 0.
    pub dropout: Vec<f64>,
    /// Learning-rate multiplier for each layer; missing entries are 1.
    pub lr_scale: Vec<f64>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 500,
            epochs: 1,
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            dropout: Vec::new(),
            lr_scale: Vec::new(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(NetworkError::Config(msg));
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1".into());
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning rate {} must be finite and >= 0", self.learning_rate));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return bad(format!("{name} = {b} must be in [0, 1)"));
            }
        }
        if !(self.epsilon > 0.0) {
            return bad(format!("epsilon {} must be > 0", self.epsilon));
        }
        if let Some(p) = self.dropout.iter().find(|p| !(0.0..1.0).contains(*p)) {
            return bad(format!("dropout probability {p} must be in [0, 1)"));
        }
        if let Some(s) = self.lr_scale.iter().find(|s| !(s.is_finite() && **s >= 0.0)) {
            return bad(format!("learning-rate scale {s} must be finite and >= 0"));
        }
        Ok(())
    }

    pub fn lr_scale_for(&self, layer: usize) -> f64 {
        self.lr_scale.get(layer).copied().unwrap_or(1.0)
    }

    pub fn dropout_for(&self, layer: usize) -> f64 {
        self.dropout.get(layer).copied().unwrap_or(0.0)
    }
}

/// Gradient of the loss with respect to one layer's parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrads {
    pub weights: Matrix,
    pub bias: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
struct Moments {
    m_w: Vec<f64>,
    v_w: Vec<f64>,
    m_b: Vec<f64>,
    v_b: Vec<f64>,
}

/// Adam optimizer state for a run of layers.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    first_index: usize,
    steps: u64,
    beta1_pow: f64,
    beta2_pow: f64,
    moments: Vec<Moments>,
}

impl Adam {
    /// State for `layers`, the first of which is layer `first_index` of the
    /// whole network.
    pub fn new(layers: &[LayerParams], first_index: usize) -> Self {
        let moments = layers
            .iter()
            .map(|l| Moments {
                m_w: vec![0.0; l.weights.as_slice().len()],
                v_w: vec![0.0; l.weights.as_slice().len()],
                m_b: vec![0.0; l.bias.len()],
                v_b: vec![0.0; l.bias.len()],
            })
            .collect();
        Self {
            first_index,
            steps: 0,
            beta1_pow: 1.0,
            beta2_pow: 1.0,
            moments,
        }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn update(&mut self, layers: &mut [LayerParams], grads: &[LayerGrads], cfg: &TrainConfig) {
        assert_eq!(layers.len(), self.moments.len(), "optimizer/layer count mismatch");
        assert_eq!(layers.len(), grads.len(), "gradient/layer count mismatch");
        self.steps += 1;
        self.beta1_pow *= cfg.beta1;
        self.beta2_pow *= cfg.beta2;
        let c1 = 1.0 - self.beta1_pow;
        let c2 = 1.0 - self.beta2_pow;
        for (i, ((layer, g), m)) in layers.iter_mut().zip(grads).zip(&mut self.moments).enumerate() {
            let lr = cfg.learning_rate * cfg.lr_scale_for(self.first_index + i);
            adam_apply(layer.weights.as_mut_slice(), g.weights.as_slice(), &mut m.m_w, &mut m.v_w, c1, c2, lr, cfg);
            adam_apply(&mut layer.bias, &g.bias, &mut m.m_b, &mut m.v_b, c1, c2, lr, cfg);
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn adam_apply(params: &mut [f64], grads: &[f64], m: &mut [f64], v: &mut [f64], c1: f64, c2: f64, lr: f64, cfg: &TrainConfig) {
    let (b1, b2, eps) = (cfg.beta1, cfg.beta2, cfg.epsilon);
    for (((p, &g), m), v) in params.iter_mut().zip(grads).zip(m.iter_mut()).zip(v.iter_mut()) {
        *m = b1 * *m + (1.0 - b1) * g;
        *v = b2 * *v + (1.0 - b2) * g * g;
        let m_hat = *m / c1;
        let v_hat = *v / c2;
        *p -= lr * m_hat / (v_hat.sqrt() + eps);
    }
}

/// Values saved by the training forward pass for one layer.
#[derive(Debug, Clone)]
pub(crate) struct LayerTape {
    /// Layer input after dropout.
    pub input: Matrix,
    /// Per-element dropout factor (0 or 1/(1-p)); `None` without dropout.
    pub keep: Option<Vec<f64>>,
    pub pre: Matrix,
    pub out: Matrix,
}

fn dropout_factors(rows: usize, cols: usize, p: f64, seed: u64, step: u64, layer: usize) -> Vec<f64> {
    let mut rng = SplitMix64::derived(seed, &[stream::DROPOUT, step, layer as u64]);
    let scale = 1.0 / (1.0 - p);
    (0..rows * cols)
        .map(|_| if rng.next_f64() >= p { scale } else { 0.0 })
        .collect()
}

/// Training-mode forward through `layers`, whose first element is layer
/// `first_index` of the whole network.
pub(crate) fn forward_train(
    layers: &[LayerParams],
    first_index: usize,
    input: Matrix,
    cfg: &TrainConfig,
    step: u64,
) -> Result<Vec<LayerTape>> {
    let mut tapes: Vec<LayerTape> = Vec::with_capacity(layers.len());
    let mut current = input;
    for (offset, layer) in layers.iter().enumerate() {
        let index = first_index + offset;
        let p = cfg.dropout_for(index);
        let keep = if p > 0.0 {
            let factors = dropout_factors(current.rows(), current.cols(), p, cfg.seed, step, index);
            current.as_mut_slice().iter_mut().zip(&factors).for_each(|(v, f)| *v *= f);
            Some(factors)
        } else {
            None
        };
        let pre = layer.pre_activation_batch(&current)?;
        let mut out = pre.clone();
        layer.activation.apply_in_place(out.as_mut_slice());
        let next = out.clone();
        tapes.push(LayerTape {
            input: current,
            keep,
            pre,
            out,
        });
        current = next;
    }
    Ok(tapes)
}

/// Back-propagates `grad_out` (dL/d output of the last layer) through
/// `layers`. Returns the parameter gradients and dL/d input of the first
/// layer, taken before that layer's dropout.
pub(crate) fn backward(layers: &[LayerParams], tapes: &[LayerTape], grad_out: Matrix) -> Result<(Vec<LayerGrads>, Matrix)> {
    let mut grads = Vec::with_capacity(layers.len());
    let mut grad = grad_out;
    for (layer, tape) in layers.iter().zip(tapes).rev() {
        if layer.activation != crate::activations::Activation::Linear {
            for (g, &z) in grad.as_mut_slice().iter_mut().zip(tape.pre.as_slice()) {
                *g *= layer.activation.derivative(z);
            }
        }
        let mut gw = Matrix::zeros(layer.in_dim(), layer.out_dim());
        gemm(1.0, &tape.input, Op::T, &grad, Op::N, 0.0, &mut gw)?;
        let mut gb = vec![0.0; layer.out_dim()];
        for r in 0..grad.rows() {
            gb.iter_mut().zip(grad.row(r)).for_each(|(b, g)| *b += g);
        }
        let mut grad_in = Matrix::zeros(grad.rows(), layer.in_dim());
        gemm(1.0, &grad, Op::N, &layer.weights, Op::T, 0.0, &mut grad_in)?;
        if let Some(keep) = &tape.keep {
            grad_in.as_mut_slice().iter_mut().zip(keep).for_each(|(g, k)| *g *= k);
        }
        grads.push(LayerGrads { weights: gw, bias: gb });
        grad = grad_in;
    }
    grads.reverse();
    Ok((grads, grad))
}

/// Mean softmax cross-entropy of `outputs` (pre-softmax rows) and its
/// gradient with respect to `outputs`.
pub fn softmax_cross_entropy(outputs: &Matrix, labels: &[usize]) -> Result<(f64, Matrix)> {
    if outputs.rows() != labels.len() {
        return Err(NetworkError::LabelCount(labels.len(), outputs.rows()));
    }
    let n = labels.len() as f64;
    let mut grad = outputs.clone();
    let mut loss = 0.0;
    for (r, &label) in labels.iter().enumerate() {
        let row = grad.row_mut(r);
        if label >= row.len() {
            return Err(NetworkError::LabelRange {
                label,
                classes: row.len(),
            });
        }
        softmax_in_place(row);
        // f64::max would turn a NaN into MIN_POSITIVE and hide divergence
        let p = row[label];
        loss -= if p.is_nan() { p } else { p.max(f64::MIN_POSITIVE).ln() };
        row[label] -= 1.0;
        row.iter_mut().for_each(|g| *g /= n);
    }
    Ok((loss / n, grad))
}

/// Loss and exact gradients of a model on a batch, without dropout.
pub fn loss_and_gradients(model: &MlpModel, inputs: &Matrix, labels: &[usize]) -> Result<(f64, Vec<LayerGrads>)> {
    let cfg = TrainConfig::default();
    let tapes = forward_train(model.layers(), 0, inputs.clone(), &cfg, 0)?;
    let out = &tapes.last().ok_or(NetworkError::NoLayers)?.out;
    let (loss, grad) = softmax_cross_entropy(out, labels)?;
    let (grads, _) = backward(model.layers(), &tapes, grad)?;
    Ok((loss, grads))
}

/// Step-wise trainer for a whole model.
#[derive(Debug, Clone)]
pub struct Trainer {
    model: MlpModel,
    adam: Adam,
    cfg: TrainConfig,
    step: u64,
}

impl Trainer {
    pub fn new(model: MlpModel, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let adam = Adam::new(model.layers(), 0);
        Ok(Self { model, adam, cfg, step: 0 })
    }

    /// One Adam step on a batch; returns the batch loss before the update.
    pub fn step(&mut self, inputs: &Matrix, labels: &[usize]) -> Result<f64> {
        let tapes = forward_train(self.model.layers(), 0, inputs.clone(), &self.cfg, self.step)?;
        let out = &tapes.last().ok_or(NetworkError::NoLayers)?.out;
        let (loss, grad) = softmax_cross_entropy(out, labels)?;
        let (grads, _) = backward(self.model.layers(), &tapes, grad)?;
        self.adam.update(self.model.layers_mut(), &grads, &self.cfg);
        self.step += 1;
        Ok(loss)
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn model(&self) -> &MlpModel {
        &self.model
    }

    pub fn into_model(self) -> MlpModel {
        self.model
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: MlpModel,
    /// Mean training loss of each epoch.
    pub loss_curve: Vec<f64>,
}

/// Sample order for `epoch`.
pub(crate) fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    SplitMix64::derived(seed, &[stream::SHUFFLE, epoch as u64]).shuffle(&mut order);
    order
}

/// Trains `model` for `cfg.epochs` epochs of shuffled mini-batches.
pub fn train(model: MlpModel, data: &Dataset, cfg: &TrainConfig) -> Result<TrainOutcome> {
    train_with_progress(model, data, cfg, |_, _| {})
}

/// [`train`] with a callback receiving `(epoch, mean loss)` after each epoch.
pub fn train_with_progress(
    model: MlpModel,
    data: &Dataset,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(usize, f64),
) -> Result<TrainOutcome> {
    if data.is_empty() {
        return Err(NetworkError::EmptyDataset);
    }
    if data.dim() != model.input_dim() {
        return Err(NetworkError::InputWidth {
            expected: model.input_dim(),
            found: data.dim(),
        });
    }
    if data.class_count() > model.output_dim() {
        return Err(NetworkError::LabelRange {
            label: data.class_count() - 1,
            classes: model.output_dim(),
        });
    }
    let mut trainer = Trainer::new(model, cfg.clone())?;
    let mut loss_curve = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let order = epoch_order(data.len(), cfg.seed, epoch);
        let mut total = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let inputs = data.images().select_rows(batch);
            let labels: Vec<usize> = batch.iter().map(|&i| data.label(i)).collect();
            let loss = trainer.step(&inputs, &labels)?;
            if !loss.is_finite() {
                return Err(NetworkError::Diverged { epoch, loss });
            }
            total += loss * batch.len() as f64;
        }
        let mean = total / data.len() as f64;
        if !mean.is_finite() {
            return Err(NetworkError::Diverged { epoch, loss: mean });
        }
        on_epoch(epoch, mean);
        loss_curve.push(mean);
    }
    Ok(TrainOutcome {
        model: trainer.into_model(),
        loss_curve,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::activations::Activation;
    use crate::network::Architecture;

    fn loss_only(model: &MlpModel, inputs: &Matrix, labels: &[usize]) -> f64 {
        let out = model.forward_batch_raw(inputs).unwrap();
        softmax_cross_entropy(&out, labels).unwrap().0
    }

    /// Central differences on every parameter of a 2-4-3 network.
    fn check_gradients(activation: Activation) {
        let arch = Architecture {
            input_dim: 2,
            layers: vec![(4, activation), (3, activation)],
        };
        let mut model = MlpModel::init(&arch, 21).unwrap();
        let mut rng = SplitMix64::new(5);
        for l in model.layers_mut() {
            l.bias.iter_mut().for_each(|b| *b = rng.uniform(0.05, 0.15));
        }
        let inputs = Matrix::from_rows(&[vec![0.9, 0.3], vec![0.2, 0.8], vec![0.6, 0.5]]).unwrap();
        let labels = [0, 2, 1];
        let (_, grads) = loss_and_gradients(&model, &inputs, &labels).unwrap();
        let h = 1e-5;
        for li in 0..model.layers().len() {
            let nw = model.layers()[li].weights.as_slice().len();
            for k in 0..nw + model.layers()[li].bias.len() {
                let analytic = if k < nw { grads[li].weights.as_slice()[k] } else { grads[li].bias[k - nw] };
                let probe = |delta: f64| {
                    let mut m = model.clone();
                    let l = &mut m.layers_mut()[li];
                    if k < nw {
                        l.weights.as_mut_slice()[k] += delta;
                    } else {
                        l.bias[k - nw] += delta;
                    }
                    loss_only(&m, &inputs, &labels)
                };
                let numeric = (probe(h) - probe(-h)) / (2.0 * h);
                let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6);
                assert!(
                    rel < 1e-4,
                    "{activation}: layer {li} param {k}: analytic {analytic} numeric {numeric}"
                );
            }
        }
    }

    #[test]
    fn gradients_linear() {
        check_gradients(Activation::Linear);
    }

    #[test]
    fn gradients_sigmoid() {
        check_gradients(Activation::Sigmoid);
    }

    #[test]
    fn gradients_tanh() {
        check_gradients(Activation::Tanh);
    }

    #[test]
    fn gradients_rectifier() {
        check_gradients(Activation::Rectifier);
    }

    #[test]
    fn gradients_ramp() {
        check_gradients(Activation::Ramp { threshold: 0.5 });
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let cfg = TrainConfig { batch_size: 0, ..TrainConfig::default() };
        assert!(cfg.validate().is_err());
        let cfg = TrainConfig { dropout: vec![1.0], ..TrainConfig::default() };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn dropout_factors_are_inverted_scaling() {
        let f = dropout_factors(10, 100, 0.2, 1, 0, 0);
        assert!(f.iter().all(|&v| v == 0.0 || v == 1.25));
        let kept = f.iter().filter(|&&v| v > 0.0).count();
        assert!((700..900).contains(&kept), "kept {kept}");
    }

    #[test]
    fn epoch_order_is_a_permutation() {
        let mut o = epoch_order(50, 3, 2);
        assert_ne!(o, (0..50).collect::<Vec<_>>());
        o.sort_unstable();
        assert_eq!(o, (0..50).collect::<Vec<_>>());
    }
}
