//! Split execution: the first `cut` layers run on the client, a few of their
//! outputs are dropped (or perturbed), and the remaining layers run on the
//! server.
//!
//! Drop masks always remove exactly `round(p * width)` positions, sampled
//! without replacement from a [`SplitMix64`] seeded either per query or from
//! the input itself ([`MaskSeeding::DataMax`]). Under `DataMax` a repeated
//! query of the same datum reproduces the same mask, so merging repeated
//! observations reveals nothing new.
//!
//! Split training exchanges [`ActivationBatch`] and [`GradientBatch`] values.
//! The server side never receives anything of input width.

use std::sync::atomic::{AtomicU64, Ordering};

use thiserror::Error;

use crate::linalg::Matrix;
use crate::network::{
    backward, forward_train, softmax, softmax_cross_entropy, Adam, LayerTape, MlpModel,
    NetworkError, TrainConfig,
};
use crate::rng::{derive_seed, mix64, stream, SplitMix64};

/// Noise level used when a config asks for noise without giving sigma.
pub const DEFAULT_NOISE_SIGMA: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SplitError {
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error("invalid split plan: {0}")]
    Plan(String),
    #[error("activation width {found} does not match cut boundary width {expected}")]
    Width { expected: usize, found: usize },
    #[error("stale mask: forward digest {expected:016x}, gradient digest {found:016x}")]
    StaleMask { expected: u64, found: u64 },
    #[error("step mismatch: expected {expected}, found {found}")]
    StepMismatch { expected: u64, found: u64 },
    #[error("gradient received with no forward pass pending")]
    NoPendingForward,
    #[error("{0} is not supported during split training")]
    Unsupported(&'static str),
}

pub type Result<T, E = SplitError> = std::result::Result<T, E>;

/// What the client does to its last layer before transmitting.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DropPolicy {
    None,
    /// Zero `round(p * width)` activation outputs.
    DropActivations { p: f64 },
    /// Zero `round(p * rows * cols)` entries of the last client weight matrix.
    DropConnections { p: f64 },
    /// Add `N(0, sigma^2)` to `round(p * width)` activation outputs.
    AddNoise { p: f64, sigma: f64 },
}

impl DropPolicy {
    pub fn probability(&self) -> f64 {
        match *self {
            DropPolicy::None => 0.0,
            DropPolicy::DropActivations { p } | DropPolicy::DropConnections { p } | DropPolicy::AddNoise { p, .. } => p,
        }
    }

    fn validate(&self) -> Result<()> {
        let p = self.probability();
        if !(0.0..1.0).contains(&p) {
            return Err(SplitError::Plan(format!("drop probability {p} must be in [0, 1)")));
        }
        if let DropPolicy::AddNoise { sigma, .. } = *self {
            if !(sigma >= 0.0 && sigma.is_finite()) {
                return Err(SplitError::Plan(format!("noise sigma {sigma} must be finite and >= 0")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum MaskSeeding {
    /// A fresh seed for every query.
    PerQueryRandom,
    /// Seed derived from the input's maximum value.
    #[default]
    DataMax,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitPlan {
    /// Number of client-resident layers.
    pub cut: usize,
    pub policy: DropPolicy,
    pub seeding: MaskSeeding,
}

impl SplitPlan {
    pub fn new(cut: usize, policy: DropPolicy, seeding: MaskSeeding) -> Self {
        Self { cut, policy, seeding }
    }

    /// Cut after the first layer, nothing dropped.
    pub fn plain(cut: usize) -> Self {
        Self::new(cut, DropPolicy::None, MaskSeeding::DataMax)
    }

    pub fn drop_activations(cut: usize, p: f64) -> Self {
        Self::new(cut, DropPolicy::DropActivations { p }, MaskSeeding::DataMax)
    }

    pub fn validate(&self, total_layers: usize) -> Result<()> {
        if self.cut == 0 || self.cut >= total_layers {
            return Err(SplitError::Plan(format!(
                "cut {} must be in [1, {}) for a {total_layers}-layer model",
                self.cut, total_layers
            )));
        }
        self.policy.validate()
    }
}

/// Positions removed from one transmitted vector (or weight matrix).
#[derive(Debug, Clone, PartialEq)]
pub struct DropMask {
    pub width: usize,
    /// Sorted, distinct, all `< width`.
    pub positions: Vec<usize>,
    pub p: f64,
    pub seed: u64,
}

impl DropMask {
    pub fn empty(width: usize) -> Self {
        Self {
            width,
            positions: Vec::new(),
            p: 0.0,
            seed: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn contains(&self, i: usize) -> bool {
        self.positions.binary_search(&i).is_ok()
    }

    /// Zeroes the masked positions of `v`.
    pub fn apply(&self, v: &mut [f64]) {
        for &i in &self.positions {
            v[i] = 0.0;
        }
    }

    /// Order-sensitive hash of the positions, used to pair forward and
    /// backward halves of a split training step.
    pub fn digest(&self) -> u64 {
        self.positions
            .iter()
            .fold(mix64(self.width as u64), |h, &i| mix64(h ^ i as u64))
    }
}

/// `round(p * width)` with halves rounded up.
pub fn drop_count(width: usize, p: f64) -> usize {
    ((p * width as f64 + 0.5).floor() as usize).min(width)
}

/// Exactly [`drop_count`] distinct positions, deterministic in `seed`.
pub fn make_mask(width: usize, p: f64, seed: u64) -> DropMask {
    let k = drop_count(width, p);
    let positions = if k == 0 {
        Vec::new()
    } else {
        SplitMix64::new(seed).sample_distinct(width, k)
    };
    DropMask { width, positions, p, seed }
}

/// `mix64` of the bit pattern of `max(x)`; `-0.0` counts as `0.0`.
pub fn seed_from_input(x: &[f64]) -> u64 {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let max = if max == 0.0 { 0.0 } else { max };
    mix64(max.to_bits())
}

/// Result of the client half for one input.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientOutput {
    /// The vector that is sent to the server.
    pub activations: Vec<f64>,
    pub mask: DropMask,
}

/// The client-resident layers and the policy applied to their output.
#[derive(Debug)]
pub struct ClientHalf {
    front: MlpModel,
    plan: SplitPlan,
    query_seed: u64,
    queries: AtomicU64,
}

impl Clone for ClientHalf {
    fn clone(&self) -> Self {
        Self {
            front: self.front.clone(),
            plan: self.plan,
            query_seed: self.query_seed,
            queries: AtomicU64::new(self.queries.load(Ordering::Relaxed)),
        }
    }
}

impl ClientHalf {
    /// `front` must hold exactly `plan.cut` layers.
    pub fn new(front: MlpModel, plan: SplitPlan) -> Result<Self> {
        if front.layers().len() != plan.cut {
            return Err(SplitError::Plan(format!(
                "front model has {} layers but the plan cuts after {}",
                front.layers().len(),
                plan.cut
            )));
        }
        plan.policy.validate()?;
        Ok(Self {
            front,
            plan,
            query_seed: 0,
            queries: AtomicU64::new(0),
        })
    }

    /// Base seed of the per-query stream (only used by `PerQueryRandom`).
    pub fn with_query_seed(mut self, seed: u64) -> Self {
        self.query_seed = seed;
        self
    }

    pub fn front(&self) -> &MlpModel {
        &self.front
    }

    pub fn plan(&self) -> &SplitPlan {
        &self.plan
    }

    pub fn input_dim(&self) -> usize {
        self.front.input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.front.output_dim()
    }

    /// Seed the next query would use for `x`.
    fn next_seed(&self, x: &[f64]) -> u64 {
        match self.plan.seeding {
            MaskSeeding::DataMax => seed_from_input(x),
            MaskSeeding::PerQueryRandom => {
                let n = self.queries.fetch_add(1, Ordering::Relaxed);
                derive_seed(self.query_seed, &[stream::QUERY, n])
            }
        }
    }

    pub fn forward(&self, x: &[f64]) -> Result<ClientOutput> {
        let seed = self.next_seed(x);
        self.forward_with_seed(x, seed)
    }

    /// Client forward with an explicit mask seed.
    pub fn forward_with_seed(&self, x: &[f64], seed: u64) -> Result<ClientOutput> {
        let layers = self.front.layers();
        if x.len() != self.front.input_dim() {
            return Err(NetworkError::InputWidth {
                expected: self.front.input_dim(),
                found: x.len(),
            }
            .into());
        }
        let (last, inner) = layers.split_last().expect("front has layers");
        let mut h = x.to_vec();
        for layer in inner {
            h = layer.forward(&h)?;
        }
        let width = last.out_dim();
        Ok(match self.plan.policy {
            DropPolicy::None => ClientOutput {
                activations: last.forward(&h)?,
                mask: DropMask::empty(width),
            },
            DropPolicy::DropActivations { p } => {
                let mut a = last.forward(&h)?;
                let mask = make_mask(width, p, seed);
                mask.apply(&mut a);
                ClientOutput { activations: a, mask }
            }
            DropPolicy::DropConnections { p } => {
                let mask = make_mask(last.in_dim() * width, p, seed);
                let mut dropped = last.clone();
                mask.apply(dropped.weights.as_mut_slice());
                ClientOutput {
                    activations: dropped.forward(&h)?,
                    mask,
                }
            }
            DropPolicy::AddNoise { p, sigma } => {
                let mut a = last.forward(&h)?;
                let mask = make_mask(width, p, seed);
                add_noise(&mut a, &mask, sigma);
                ClientOutput { activations: a, mask }
            }
        })
    }
}

fn add_noise(a: &mut [f64], mask: &DropMask, sigma: f64) {
    let mut rng = SplitMix64::derived(mask.seed, &[stream::NOISE]);
    for &i in &mask.positions {
        a[i] += sigma * rng.standard_normal();
    }
}

/// The server-resident layers.
#[derive(Debug, Clone)]
pub struct ServerHalf {
    rear: MlpModel,
    fingerprint: [u8; 32],
}

impl ServerHalf {
    pub fn new(rear: MlpModel) -> Self {
        let fingerprint = rear.fingerprint();
        Self { rear, fingerprint }
    }

    pub fn rear(&self) -> &MlpModel {
        &self.rear
    }

    /// SHA-256 of the serialized rear model.
    pub fn fingerprint(&self) -> [u8; 32] {
        self.fingerprint
    }

    /// Width of the vectors the server accepts.
    pub fn boundary_width(&self) -> usize {
        self.rear.input_dim()
    }

    /// Class probabilities for one transmitted vector.
    pub fn forward(&self, a: &[f64]) -> Result<Vec<f64>> {
        if a.len() != self.rear.input_dim() {
            return Err(SplitError::Width {
                expected: self.rear.input_dim(),
                found: a.len(),
            });
        }
        Ok(softmax(&self.rear.forward_raw(a)?))
    }

    pub fn forward_batch(&self, a: &Matrix) -> Result<Matrix> {
        if a.cols() != self.rear.input_dim() {
            return Err(SplitError::Width {
                expected: self.rear.input_dim(),
                found: a.cols(),
            });
        }
        Ok(self.rear.forward_batch(a)?)
    }
}

/// Splits `model` according to `plan`.
pub fn split_model(model: &MlpModel, plan: SplitPlan) -> Result<(ClientHalf, ServerHalf)> {
    plan.validate(model.layers().len())?;
    let (front, rear) = model.split_at(plan.cut)?;
    Ok((ClientHalf::new(front, plan)?, ServerHalf::new(rear)))
}

/// Client-to-server message of a split training step.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationBatch {
    pub step: u64,
    /// One row per sample, masked.
    pub values: Matrix,
    pub mask_digest: u64,
}

/// Server-to-client reply: dL/d(transmitted activations).
#[derive(Debug, Clone, PartialEq)]
pub struct GradientBatch {
    pub step: u64,
    pub mask_digest: u64,
    pub grad: Matrix,
    /// Batch loss before the update.
    pub loss: f64,
}

#[derive(Debug)]
struct PendingStep {
    step: u64,
    digest: u64,
    tapes: Vec<LayerTape>,
    masks: Vec<DropMask>,
}

/// Client side of split training: owns the front layers and their optimizer.
#[derive(Debug)]
pub struct ClientTrainer {
    front: MlpModel,
    plan: SplitPlan,
    adam: Adam,
    cfg: TrainConfig,
    query_seed: u64,
    step: u64,
    pending: Option<PendingStep>,
}

impl ClientTrainer {
    pub fn new(front: MlpModel, plan: SplitPlan, cfg: TrainConfig) -> Result<Self> {
        if matches!(plan.policy, DropPolicy::DropConnections { .. }) {
            return Err(SplitError::Unsupported("dropping connections"));
        }
        if front.layers().len() != plan.cut {
            return Err(SplitError::Plan(format!(
                "front model has {} layers but the plan cuts after {}",
                front.layers().len(),
                plan.cut
            )));
        }
        plan.policy.validate()?;
        cfg.validate()?;
        let adam = Adam::new(front.layers(), 0);
        Ok(Self {
            front,
            plan,
            adam,
            cfg,
            query_seed: 0,
            step: 0,
            pending: None,
        })
    }

    pub fn with_query_seed(mut self, seed: u64) -> Self {
        self.query_seed = seed;
        self
    }

    pub fn front(&self) -> &MlpModel {
        &self.front
    }

    pub fn into_front(self) -> MlpModel {
        self.front
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Forward pass over a batch of private inputs; the result is what the
    /// server receives.
    pub fn forward(&mut self, inputs: &Matrix) -> Result<ActivationBatch> {
        let tapes = forward_train(self.front.layers(), 0, inputs.clone(), &self.cfg, self.step)?;
        let mut values = tapes.last().expect("front has layers").out.clone();
        let width = values.cols();
        let p = self.plan.policy.probability();
        let mut masks = Vec::with_capacity(values.rows());
        let mut digest = mix64(self.step);
        for r in 0..values.rows() {
            let seed = match self.plan.seeding {
                MaskSeeding::DataMax => seed_from_input(inputs.row(r)),
                MaskSeeding::PerQueryRandom => derive_seed(self.query_seed, &[stream::QUERY, self.step, r as u64]),
            };
            let mask = make_mask(width, p, seed);
            match self.plan.policy {
                DropPolicy::DropActivations { .. } => mask.apply(values.row_mut(r)),
                DropPolicy::AddNoise { sigma, .. } => add_noise(values.row_mut(r), &mask, sigma),
                DropPolicy::None | DropPolicy::DropConnections { .. } => {}
            }
            digest = mix64(digest ^ mask.digest());
            masks.push(mask);
        }
        self.pending = Some(PendingStep {
            step: self.step,
            digest,
            tapes,
            masks,
        });
        Ok(ActivationBatch {
            step: self.step,
            values,
            mask_digest: digest,
        })
    }

    /// Completes the step with the server's gradient and updates the front
    /// layers locally.
    pub fn apply_gradient(&mut self, reply: &GradientBatch) -> Result<()> {
        let pending = self.pending.take().ok_or(SplitError::NoPendingForward)?;
        if reply.step != pending.step {
            return Err(SplitError::StepMismatch {
                expected: pending.step,
                found: reply.step,
            });
        }
        if reply.mask_digest != pending.digest {
            return Err(SplitError::StaleMask {
                expected: pending.digest,
                found: reply.mask_digest,
            });
        }
        let out = &pending.tapes.last().expect("front has layers").out;
        if reply.grad.shape() != out.shape() {
            return Err(SplitError::Width {
                expected: out.cols(),
                found: reply.grad.cols(),
            });
        }
        let mut grad = reply.grad.clone();
        if matches!(self.plan.policy, DropPolicy::DropActivations { .. }) {
            for (r, mask) in pending.masks.iter().enumerate() {
                mask.apply(grad.row_mut(r));
            }
        }
        let (grads, _) = backward(self.front.layers(), &pending.tapes, grad)?;
        self.adam.update(self.front.layers_mut(), &grads, &self.cfg);
        self.step += 1;
        Ok(())
    }
}

/// Server side of split training. It is constructed without any knowledge
/// of the client's input width and only ever sees transmitted activations.
#[derive(Debug)]
pub struct ServerTrainer {
    rear: MlpModel,
    first_index: usize,
    adam: Adam,
    cfg: TrainConfig,
    step: u64,
}

impl ServerTrainer {
    /// `cut` is the global index of the first rear layer.
    pub fn new(rear: MlpModel, cut: usize, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let adam = Adam::new(rear.layers(), cut);
        Ok(Self {
            rear,
            first_index: cut,
            adam,
            cfg,
            step: 0,
        })
    }

    pub fn rear(&self) -> &MlpModel {
        &self.rear
    }

    pub fn into_rear(self) -> MlpModel {
        self.rear
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Forward, loss, backward and update of the rear layers; returns the
    /// gradient with respect to the received activations.
    pub fn step(&mut self, batch: &ActivationBatch, labels: &[usize]) -> Result<GradientBatch> {
        if batch.step != self.step {
            return Err(SplitError::StepMismatch {
                expected: self.step,
                found: batch.step,
            });
        }
        if batch.values.cols() != self.rear.input_dim() {
            return Err(SplitError::Width {
                expected: self.rear.input_dim(),
                found: batch.values.cols(),
            });
        }
        let tapes = forward_train(self.rear.layers(), self.first_index, batch.values.clone(), &self.cfg, self.step)?;
        let out = &tapes.last().expect("rear has layers").out;
        let (loss, grad_out) = softmax_cross_entropy(out, labels)?;
        let (grads, grad_in) = backward(self.rear.layers(), &tapes, grad_out)?;
        self.adam.update(self.rear.layers_mut(), &grads, &self.cfg);
        self.step += 1;
        Ok(GradientBatch {
            step: batch.step,
            mask_digest: batch.mask_digest,
            grad: grad_in,
            loss,
        })
    }
}

/// One in-process two-party training step; returns the batch loss.
pub fn split_backprop_step(
    client: &mut ClientTrainer,
    server: &mut ServerTrainer,
    inputs: &Matrix,
    labels: &[usize],
) -> Result<f64> {
    let batch = client.forward(inputs)?;
    let reply = server.step(&batch, labels)?;
    client.apply_gradient(&reply)?;
    Ok(reply.loss)
}

/// Reassembles a model from trained halves.
pub fn join_halves(front: &MlpModel, rear: &MlpModel) -> Result<MlpModel> {
    let layers = front.layers().iter().chain(rear.layers()).cloned().collect();
    Ok(MlpModel::new(front.input_dim(), layers)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::activations::Activation;
    use crate::network::Architecture;
    use proptest::prelude::*;

    fn sigmoid_model() -> MlpModel {
        MlpModel::init(&Architecture::mlp(6, &[10, 5], Activation::Sigmoid, 3), 7).unwrap()
    }

    #[test]
    fn mask_count_examples() {
        assert_eq!(make_mask(800, 0.005, 1).len(), 4);
        assert!(make_mask(800, 0.0, 1).is_empty());
        assert_eq!(make_mask(800, 0.005, 9), make_mask(800, 0.005, 9));
        assert_eq!(drop_count(10, 0.05), 1);
        assert_eq!(drop_count(10, 0.04), 0);
    }

    #[test]
    fn seed_examples() {
        let x = [0.1, 0.9, 0.3];
        assert_eq!(seed_from_input(&x), seed_from_input(&x));
        assert_eq!(seed_from_input(&x), seed_from_input(&[0.9, 0.3, 0.1]));
        assert_eq!(seed_from_input(&[0.0; 4]), mix64(0.0f64.to_bits()));
        assert_eq!(seed_from_input(&[-0.0, -1.0]), seed_from_input(&[0.0, -1.0]));
    }

    #[test]
    fn plan_validation() {
        assert!(SplitPlan::plain(0).validate(3).is_err());
        assert!(SplitPlan::plain(3).validate(3).is_err());
        assert!(SplitPlan::drop_activations(1, 1.0).validate(3).is_err());
        let noisy = SplitPlan::new(1, DropPolicy::AddNoise { p: 0.1, sigma: -1.0 }, MaskSeeding::DataMax);
        assert!(noisy.validate(3).is_err());
        assert!(SplitPlan::drop_activations(2, 0.5).validate(3).is_ok());
    }

    #[test]
    fn plain_split_matches_monolithic() {
        let m = sigmoid_model();
        let (client, server) = split_model(&m, SplitPlan::plain(1)).unwrap();
        let x = [0.2, 0.4, 0.0, 1.0, 0.7, 0.3];
        let out = client.forward(&x).unwrap();
        assert_eq!(out.activations, m.forward(&x).unwrap().activations[0]);
        let p = server.forward(&out.activations).unwrap();
        let q = m.predict(&x).unwrap();
        for (a, b) in p.iter().zip(&q) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn dropped_positions_are_exact_zeros() {
        let m = sigmoid_model();
        let (client, _) = split_model(&m, SplitPlan::drop_activations(1, 0.2)).unwrap();
        let x = [0.2, 0.4, 0.0, 1.0, 0.7, 0.3];
        let plain = m.forward(&x).unwrap().activations[0].clone();
        let out = client.forward(&x).unwrap();
        assert_eq!(out.mask.len(), 2);
        for i in 0..10 {
            if out.mask.contains(i) {
                assert_eq!(out.activations[i], 0.0);
            } else {
                assert_eq!(out.activations[i], plain[i]);
                assert!(out.activations[i] > 0.0 && out.activations[i] < 1.0);
            }
        }
        assert_eq!(client.forward(&x).unwrap(), out);
    }

    #[test]
    fn per_query_seeding_varies() {
        let m = sigmoid_model();
        let plan = SplitPlan::new(1, DropPolicy::DropActivations { p: 0.3 }, MaskSeeding::PerQueryRandom);
        let (client, _) = split_model(&m, plan).unwrap();
        let x = [0.5; 6];
        let masks: Vec<_> = (0..8).map(|_| client.forward(&x).unwrap().mask.positions).collect();
        assert!(masks.windows(2).any(|w| w[0] != w[1]));
    }

    #[test]
    fn dropping_connections_zeroes_weights_not_outputs() {
        let m = MlpModel::init(&Architecture::mlp(4, &[6], Activation::Linear, 2), 3).unwrap();
        let plan = SplitPlan::new(1, DropPolicy::DropConnections { p: 0.1 }, MaskSeeding::DataMax);
        let (client, _) = split_model(&m, plan).unwrap();
        let x = [1.0, 0.5, 0.25, 0.125];
        let out = client.forward(&x).unwrap();
        assert_eq!(out.mask.width, 24);
        assert_eq!(out.mask.len(), 2);
        let mut w = m.layers()[0].weights.clone();
        out.mask.apply(w.as_mut_slice());
        let expected = crate::linalg::vec_mat(&x, &w).unwrap();
        assert_eq!(out.activations, expected);
    }

    #[test]
    fn noise_touches_only_masked_positions() {
        let m = sigmoid_model();
        let plan = SplitPlan::new(1, DropPolicy::AddNoise { p: 0.3, sigma: 0.1 }, MaskSeeding::DataMax);
        let (client, _) = split_model(&m, plan).unwrap();
        let x = [0.1; 6];
        let plain = m.forward(&x).unwrap().activations[0].clone();
        let out = client.forward(&x).unwrap();
        for i in 0..10 {
            if out.mask.contains(i) {
                assert_ne!(out.activations[i], plain[i]);
            } else {
                assert_eq!(out.activations[i], plain[i]);
            }
        }
    }

    #[test]
    fn zero_activation_vector_gives_probabilities() {
        let (_, server) = split_model(&sigmoid_model(), SplitPlan::plain(1)).unwrap();
        let p = server.forward(&[0.0; 10]).unwrap();
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(matches!(server.forward(&[0.0; 9]), Err(SplitError::Width { .. })));
    }

    #[test]
    fn stale_mask_is_rejected() {
        let m = sigmoid_model();
        let (front, rear) = m.split_at(1).unwrap();
        let cfg = TrainConfig {
            batch_size: 2,
            ..Default::default()
        };
        let mut client = ClientTrainer::new(front, SplitPlan::drop_activations(1, 0.2), cfg.clone()).unwrap();
        let mut server = ServerTrainer::new(rear, 1, cfg).unwrap();
        let x = Matrix::from_rows(&[vec![0.1; 6], vec![0.9; 6]]).unwrap();
        let batch = client.forward(&x).unwrap();
        let mut reply = server.step(&batch, &[0, 2]).unwrap();
        reply.mask_digest ^= 1;
        assert!(matches!(client.apply_gradient(&reply), Err(SplitError::StaleMask { .. })));
        assert!(matches!(client.apply_gradient(&reply), Err(SplitError::NoPendingForward)));
    }

    #[test]
    fn masked_coordinates_carry_no_gradient() {
        let m = sigmoid_model();
        let (front, rear) = m.split_at(1).unwrap();
        let cfg = TrainConfig {
            batch_size: 1,
            learning_rate: 0.01,
            ..Default::default()
        };
        let mut client = ClientTrainer::new(front.clone(), SplitPlan::drop_activations(1, 0.3), cfg.clone()).unwrap();
        let mut server = ServerTrainer::new(rear, 1, cfg).unwrap();
        let x = Matrix::from_rows(&[vec![0.3, 0.1, 0.9, 0.4, 0.0, 0.6]]).unwrap();
        let mask = make_mask(10, 0.3, seed_from_input(x.row(0)));
        split_backprop_step(&mut client, &mut server, &x, &[1]).unwrap();
        let before = &front.layers()[0];
        let after = &client.front().layers()[0];
        for j in 0..10 {
            let changed = (0..6).any(|i| before.weights.get(i, j) != after.weights.get(i, j)) || before.bias[j] != after.bias[j];
            assert_eq!(changed, !mask.contains(j), "unit {j}");
        }
    }

    proptest! {
        #[test]
        fn mask_invariants(width in 1usize..2000, p in 0.0f64..0.999, seed: u64) {
            let m = make_mask(width, p, seed);
            prop_assert_eq!(m.len(), drop_count(width, p));
            prop_assert!(m.positions.windows(2).all(|w| w[0] < w[1]));
            prop_assert!(m.positions.iter().all(|&i| i < width));
            prop_assert_eq!(make_mask(width, p, seed), m);
        }
    }
}
