//! The adversary: reconstruction of a client's input from what the server
//! receives, plus the cost models for attacks that are only feasible at toy
//! scale.
//!
//! Reconstructions either multiply by the pseudo-inverse of `W` (exact when
//! nothing was dropped and the activation is invertible) or by `Wᵀ`. Transpose
//! reconstructions are min-max rescaled to `[0, 1]`, since the raw product has
//! no meaningful scale.

use std::fmt;
use std::str::FromStr;
use std::time::Duration;

use num_bigint::BigUint;
use num_rational::BigRational;
use num_traits::{One, ToPrimitive};
use thiserror::Error;

use crate::activations::Activation;
use crate::linalg::{self, LinalgError, Matrix};
use crate::metrics::{kl_divergence_image, min_max_rescale, relative_l2, MetricsError};
use crate::network::{argmax, LayerParams, MlpModel, NetworkError};
use crate::rng::{stream, SplitMix64};
use crate::splitexec::{ClientHalf, SplitError};

/// Relative L2 below which a reconstruction counts as exact.
pub const EXACT_RELATIVE_L2: f64 = 1e-6;

/// Relative L2 above which a reconstruction counts as defeated.
pub const DEFEATED_RELATIVE_L2: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AttackError {
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Split(#[from] SplitError),
    #[error("strategy does not apply to {0} layers")]
    StrategyInapplicable(Activation),
    #[error("activation value {value} at index {index} is outside the invertible range")]
    OutOfRange { index: usize, value: f64 },
    #[error("expected {expected} values, found {found}")]
    Shape { expected: usize, found: usize },
    #[error("{0}")]
    Domain(String),
}

pub type Result<T, E = AttackError> = std::result::Result<T, E>;

/// How the linear part of a layer is undone.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InversionMode {
    /// Multiply by the pseudo-inverse of `W`.
    PseudoInverse,
    /// Multiply by `Wᵀ`, then rescale the result to `[0, 1]`.
    Transpose,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Strategy {
    Exact,
    PseudoInverse,
    Transpose,
    TwoLayerTranspose,
    BruteForce,
    RepeatedQuery,
}

impl Strategy {
    pub const ALL: [Strategy; 6] = [
        Strategy::Exact,
        Strategy::PseudoInverse,
        Strategy::Transpose,
        Strategy::TwoLayerTranspose,
        Strategy::BruteForce,
        Strategy::RepeatedQuery,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::Exact => "exact",
            Strategy::PseudoInverse => "pinv",
            Strategy::Transpose => "transpose",
            Strategy::TwoLayerTranspose => "transpose2",
            Strategy::BruteForce => "bruteforce",
            Strategy::RepeatedQuery => "repeated",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Strategy {
    type Err = AttackError;

    fn from_str(s: &str) -> Result<Self> {
        Strategy::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| AttackError::Domain(format!("unknown strategy `{s}`")))
    }
}

/// Outcome of one reconstruction.
#[derive(Debug, Clone, PartialEq)]
pub struct AttackReport {
    pub strategy: Strategy,
    pub x_hat: Vec<f64>,
    pub kl_divergence: f64,
    pub l2_error: f64,
    pub succeeded_exact: bool,
}

impl AttackReport {
    pub fn score(strategy: Strategy, x: &[f64], x_hat: Vec<f64>) -> Result<Self> {
        let kl_divergence = kl_divergence_image(x, &x_hat)?;
        let l2_error = relative_l2(x, &x_hat)?;
        Ok(Self {
            strategy,
            x_hat,
            kl_divergence,
            l2_error,
            succeeded_exact: l2_error < EXACT_RELATIVE_L2,
        })
    }
}

/// Whether `model` classifies a reconstruction as `label`; a crude stand-in
/// for "a human would recognize it".
pub fn proxy_recognized(model: &MlpModel, x_hat: &[f64], label: usize) -> Result<bool> {
    Ok(argmax(&model.forward_raw(x_hat)?) == label)
}

/// One layer with its inversion matrix precomputed.
#[derive(Debug, Clone)]
pub struct LayerInverter {
    layer: LayerParams,
    mode: InversionMode,
    /// `out_dim x in_dim`: the pseudo-inverse or the transpose of `W`.
    back: Matrix,
}

impl LayerInverter {
    pub fn new(layer: &LayerParams, mode: InversionMode) -> Result<Self> {
        let back = match mode {
            InversionMode::PseudoInverse => linalg::pseudo_inverse(&layer.weights)?,
            InversionMode::Transpose => layer.weights.transpose(),
        };
        Ok(Self {
            layer: layer.clone(),
            mode,
            back,
        })
    }

    pub fn layer(&self) -> &LayerParams {
        &self.layer
    }

    pub fn mode(&self) -> InversionMode {
        self.mode
    }

    fn check(&self, a: &[f64]) -> Result<()> {
        if a.len() != self.layer.out_dim() {
            return Err(AttackError::Shape {
                expected: self.layer.out_dim(),
                found: a.len(),
            });
        }
        Ok(())
    }

    /// `(z − b)·back`, unscaled.
    fn unmix(&self, mut z: Vec<f64>) -> Result<Vec<f64>> {
        z.iter_mut().zip(&self.layer.bias).for_each(|(z, b)| *z -= b);
        Ok(linalg::vec_mat(&z, &self.back)?)
    }

    /// Exact inverse of the layer; every entry of `a` must be invertible.
    pub fn exact(&self, a: &[f64]) -> Result<Vec<f64>> {
        self.check(a)?;
        let f = self.layer.activation;
        if !f.is_invertible() {
            return Err(AttackError::StrategyInapplicable(f));
        }
        if self.layer.out_dim() < self.layer.in_dim() {
            return Err(AttackError::Domain(format!(
                "exact inversion needs width >= input dim, layer is {}x{}",
                self.layer.in_dim(),
                self.layer.out_dim()
            )));
        }
        let z = a
            .iter()
            .enumerate()
            .map(|(index, &value)| f.inverse(value).ok_or(AttackError::OutOfRange { index, value }))
            .collect::<Result<Vec<_>>>()?;
        self.unmix(z)
    }

    /// Approximate inverse: clamped activation inverse, then `back`, without
    /// the final rescale.
    pub fn approximate_raw(&self, a: &[f64]) -> Result<Vec<f64>> {
        self.check(a)?;
        self.unmix(self.layer.activation.approx_inverse(a))
    }

    /// Approximate inverse; rescaled in transpose mode.
    pub fn approximate(&self, a: &[f64]) -> Result<Vec<f64>> {
        let x = self.approximate_raw(a)?;
        Ok(match self.mode {
            InversionMode::PseudoInverse => x,
            InversionMode::Transpose => min_max_rescale(&x),
        })
    }
}

/// Exact reconstruction through one layer.
pub fn invert_exact(a: &[f64], layer: &LayerParams) -> Result<Vec<f64>> {
    LayerInverter::new(layer, InversionMode::PseudoInverse)?.exact(a)
}

/// Exact reconstruction through a stack of layers, last layer first.
pub fn invert_exact_chain(a: &[f64], layers: &[LayerParams]) -> Result<Vec<f64>> {
    let mut v = a.to_vec();
    for layer in layers.iter().rev() {
        v = invert_exact(&v, layer)?;
    }
    Ok(v)
}

/// Reconstruction from activations with some outputs dropped.
pub fn invert_dropped(a_hat: &[f64], layer: &LayerParams, mode: InversionMode) -> Result<Vec<f64>> {
    LayerInverter::new(layer, mode)?.approximate(a_hat)
}

/// Chained approximate inversion through several layers.
#[derive(Debug, Clone)]
pub struct ChainInverter {
    stages: Vec<LayerInverter>,
    mode: InversionMode,
}

impl ChainInverter {
    pub fn new(layers: &[LayerParams], mode: InversionMode) -> Result<Self> {
        if layers.is_empty() {
            return Err(NetworkError::NoLayers.into());
        }
        let stages = layers.iter().map(|l| LayerInverter::new(l, mode)).collect::<Result<_>>()?;
        Ok(Self { stages, mode })
    }

    pub fn reconstruct(&self, a: &[f64]) -> Result<Vec<f64>> {
        let mut v = a.to_vec();
        for stage in self.stages.iter().rev() {
            v = stage.approximate_raw(&v)?;
        }
        Ok(match self.mode {
            InversionMode::PseudoInverse => v,
            InversionMode::Transpose => min_max_rescale(&v),
        })
    }
}

/// `(a − b)·W⁺` or `(a − b)·Wᵀ` chained backwards through rectifier or ramp
/// layers.
pub fn invert_rectifier(a: &[f64], layers: &[LayerParams], mode: InversionMode) -> Result<Vec<f64>> {
    if let Some(l) = layers
        .iter()
        .find(|l| !matches!(l.activation, Activation::Rectifier | Activation::Ramp { .. }))
    {
        return Err(AttackError::StrategyInapplicable(l.activation));
    }
    ChainInverter::new(layers, mode)?.reconstruct(a)
}

/// Linear layer helper: `(x·M + b − b)·P` where `M` is the (possibly
/// perturbed) weight matrix actually used in the forward pass.
fn leak(x: &[f64], layer: &LayerParams, used: &Matrix, dropped: &[usize]) -> Result<(Vec<f64>, f64)> {
    if layer.activation != Activation::Linear {
        return Err(AttackError::StrategyInapplicable(layer.activation));
    }
    if x.len() != layer.in_dim() {
        return Err(AttackError::Shape {
            expected: layer.in_dim(),
            found: x.len(),
        });
    }
    let p = linalg::pseudo_inverse(&layer.weights)?;
    let mut a = linalg::vec_mat(x, used)?;
    a.iter_mut().zip(&layer.bias).for_each(|(a, b)| *a += b);
    for &i in dropped {
        a[i] = 0.0;
    }
    a.iter_mut().zip(&layer.bias).for_each(|(a, b)| *a -= b);
    let x_rec = linalg::vec_mat(&a, &p)?;
    let deviation = relative_l2(x, &x_rec)?;
    Ok((x_rec, deviation))
}

/// Forward through `W ⊙ D` (D binary, same shape as W) and invert with the
/// pseudo-inverse of the undamaged `W`. Returns the reconstruction and its
/// relative deviation from `x`.
pub fn dropping_connections_leak(x: &[f64], layer: &LayerParams, d: &Matrix) -> Result<(Vec<f64>, f64)> {
    let used = layer.weights.hadamard(d)?;
    leak(x, layer, &used, &[])
}

/// Same experiment with activation outputs `dropped` zeroed instead.
pub fn dropping_activations_leak(x: &[f64], layer: &LayerParams, dropped: &[usize]) -> Result<(Vec<f64>, f64)> {
    if let Some(&i) = dropped.iter().find(|&&i| i >= layer.out_dim()) {
        return Err(AttackError::Shape {
            expected: layer.out_dim(),
            found: i,
        });
    }
    leak(x, layer, &layer.weights, dropped)
}

/// Size of the brute-force search over dropped pre-activations.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BruteForceModel {
    pub grid_points: u64,
    pub dropped: u32,
    /// `grid_points ^ dropped`, exact.
    pub total_combinations: BigUint,
}

impl BruteForceModel {
    /// Wall-clock estimate at `rate` candidates per second; `None` if the
    /// estimate does not fit a `Duration`.
    pub fn projected_duration(&self, rate: f64) -> Option<Duration> {
        let total = self.total_combinations.to_f64()?;
        let secs = total / rate;
        (secs.is_finite() && secs >= 0.0).then(|| Duration::try_from_secs_f64(secs).ok()).flatten()
    }
}

pub fn brute_force_cost(grid_points: u64, dropped: u32) -> BruteForceModel {
    BruteForceModel {
        grid_points,
        dropped,
        total_combinations: BigUint::from(grid_points).pow(dropped),
    }
}

/// Result of an exhaustive search.
#[derive(Debug, Clone, PartialEq)]
pub struct BruteForceOutcome {
    pub x_hat: Vec<f64>,
    /// Indices of the outputs that were treated as dropped.
    pub dropped: Vec<usize>,
    /// Grid values chosen for each dropped pre-activation.
    pub guess: Vec<f64>,
    pub candidates: u64,
    /// Consistency residual of the winning candidate.
    pub residual: f64,
}

/// Exhaustive search over `grid` for every dropped pre-activation of an
/// invertible layer with more outputs than inputs. Dropped positions are
/// those outside the activation's range (a dropped sigmoid output is 0).
/// Each candidate pre-activation vector `z` is mapped to `x̂ = (z − b)·W⁺`;
/// the candidate whose `x̂·W + b` reproduces `z` best wins.
pub fn brute_force_attack(a_hat: &[f64], layer: &LayerParams, grid: &[f64]) -> Result<BruteForceOutcome> {
    let f = layer.activation;
    if !f.is_invertible() || f == Activation::Linear {
        return Err(AttackError::StrategyInapplicable(f));
    }
    if layer.out_dim() <= layer.in_dim() {
        return Err(AttackError::Domain(
            "brute force needs more outputs than inputs to score candidates".into(),
        ));
    }
    if a_hat.len() != layer.out_dim() {
        return Err(AttackError::Shape {
            expected: layer.out_dim(),
            found: a_hat.len(),
        });
    }
    if grid.is_empty() {
        return Err(AttackError::Domain("empty grid".into()));
    }
    let mut z: Vec<f64> = a_hat.iter().map(|&v| f.inverse(v).unwrap_or(f64::NAN)).collect();
    let dropped: Vec<usize> = (0..z.len()).filter(|&i| z[i].is_nan()).collect();
    let m = u32::try_from(dropped.len()).map_err(|_| AttackError::Domain("too many dropped outputs".into()))?;
    let total = (grid.len() as u64)
        .checked_pow(m)
        .ok_or_else(|| AttackError::Domain(format!("{}^{m} candidates overflow", grid.len())))?;
    let p = linalg::pseudo_inverse(&layer.weights)?;

    let mut digits = vec![0usize; dropped.len()];
    let mut best: Option<(f64, Vec<usize>, Vec<f64>)> = None;
    for _ in 0..total {
        for (&i, &d) in dropped.iter().zip(&digits) {
            z[i] = grid[d];
        }
        let mut centered = z.clone();
        centered.iter_mut().zip(&layer.bias).for_each(|(v, b)| *v -= b);
        let x_hat = linalg::vec_mat(&centered, &p)?;
        let back = linalg::vec_mat(&x_hat, &layer.weights)?;
        let residual = back
            .iter()
            .zip(&centered)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        if best.as_ref().is_none_or(|(r, _, _)| residual < *r) {
            best = Some((residual, digits.clone(), x_hat));
        }
        for d in digits.iter_mut() {
            *d += 1;
            if *d < grid.len() {
                break;
            }
            *d = 0;
        }
    }
    let (residual, digits, x_hat) = best.expect("at least one candidate");
    Ok(BruteForceOutcome {
        x_hat,
        guess: digits.iter().map(|&d| grid[d]).collect(),
        dropped,
        candidates: total,
        residual,
    })
}

/// `n` evenly spaced points covering `[lo, hi]`.
pub fn uniform_grid(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    match n {
        0 => Vec::new(),
        1 => vec![lo],
        _ => (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect(),
    }
}

/// A small exhaustive-search problem with a known answer.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyBruteForce {
    pub layer: LayerParams,
    pub x: Vec<f64>,
    /// Transmitted activations, with the dropped outputs zeroed.
    pub a_hat: Vec<f64>,
    pub grid: Vec<f64>,
    pub dropped: Vec<usize>,
}

/// Random `in_dim x width` sigmoid layer and input with `m` outputs dropped.
/// Each dropped unit's bias is shifted so that its pre-activation lies on
/// the `grid_points`-point grid over [-2.5, 2.5]; otherwise no finite grid
/// could recover `x` exactly.
pub fn toy_brute_force_instance(
    in_dim: usize,
    width: usize,
    m: usize,
    grid_points: usize,
    seed: u64,
) -> Result<ToyBruteForce> {
    if width <= in_dim || m > width || grid_points == 0 {
        return Err(AttackError::Domain(format!(
            "need width > in_dim, m <= width and a non-empty grid (got {in_dim}, {width}, {m}, {grid_points})"
        )));
    }
    let mut rng = SplitMix64::derived(seed, &[stream::INIT]);
    let limit = (6.0 / (in_dim + width) as f64).sqrt();
    let weights = Matrix::from_fn(in_dim, width, |_, _| rng.uniform(-limit, limit));
    let bias = (0..width).map(|_| rng.uniform(-0.1, 0.1)).collect();
    let mut layer = LayerParams::new(weights, bias, Activation::Sigmoid)?;
    let x: Vec<f64> = (0..in_dim).map(|_| rng.next_f64()).collect();
    let grid = uniform_grid(-2.5, 2.5, grid_points);
    let mut dropped = rng.sample_distinct(width, m);
    dropped.sort_unstable();
    let z = layer.pre_activation(&x)?;
    for &j in &dropped {
        let target = grid[rng.below(grid_points as u64) as usize];
        layer.bias[j] += target - z[j];
    }
    let mut a_hat = layer.forward(&x)?;
    for &j in &dropped {
        a_hat[j] = 0.0;
    }
    Ok(ToyBruteForce {
        layer,
        x,
        a_hat,
        grid,
        dropped,
    })
}

fn binomial(n: u64, k: u64) -> BigUint {
    let mut acc = BigUint::one();
    for i in 0..k {
        acc = acc * BigUint::from(n - i) / BigUint::from(i + 1);
    }
    acc
}

/// Probability that a second uniformly drawn `m`-subset of `n` positions
/// avoids a first one: `C(n−m, m) / C(n, m)`, in exact rational arithmetic.
pub fn overlap_probability(n: u64, m: u64) -> Result<f64> {
    if m.checked_mul(2).is_none_or(|two_m| two_m > n) {
        return Err(AttackError::Domain(format!("need 2M <= N, got N={n}, M={m}")));
    }
    let ratio = BigRational::new(binomial(n - m, m).into(), binomial(n, m).into());
    ratio
        .to_f64()
        .ok_or_else(|| AttackError::Domain("ratio not representable".into()))
}

/// Outcome of merging repeated queries of the same input.
#[derive(Debug, Clone, PartialEq)]
pub struct RepeatedQueryOutcome {
    /// Coordinates observed so far after each query.
    pub coverage: Vec<usize>,
    pub width: usize,
    /// Number of queries after which every coordinate was observed.
    pub queries_to_full: Option<usize>,
    /// Merged transmission (unobserved coordinates are 0).
    pub merged: Vec<f64>,
    /// Exact reconstruction, once coverage is complete.
    pub x_hat: Option<Vec<f64>>,
}

/// Sends `x` through `client` up to `trials` times and keeps every non-zero
/// coordinate seen. Stops early at full coverage; `x_hat` is left empty.
pub fn repeated_query_coverage(client: &ClientHalf, x: &[f64], trials: usize) -> Result<RepeatedQueryOutcome> {
    let width = client.output_dim();
    let mut merged = vec![0.0; width];
    let mut known = vec![false; width];
    let mut coverage = Vec::with_capacity(trials);
    let mut queries_to_full = None;
    for t in 0..trials {
        let out = client.forward(x)?;
        for (i, &v) in out.activations.iter().enumerate() {
            if v != 0.0 && !known[i] {
                known[i] = true;
                merged[i] = v;
            }
        }
        let c = known.iter().filter(|&&k| k).count();
        coverage.push(c);
        if c == width {
            queries_to_full = Some(t + 1);
            break;
        }
    }
    Ok(RepeatedQueryOutcome {
        coverage,
        width,
        queries_to_full,
        merged,
        x_hat: None,
    })
}

/// [`repeated_query_coverage`] followed by exact inversion of the front once
/// nothing is missing.
pub fn repeated_query_attack(client: &ClientHalf, x: &[f64], trials: usize) -> Result<RepeatedQueryOutcome> {
    let mut out = repeated_query_coverage(client, x, trials)?;
    if out.queries_to_full.is_some() {
        out.x_hat = Some(invert_exact_chain(&out.merged, client.front().layers())?);
    }
    Ok(out)
}

/// Mean KL divergence over a set of reports.
pub fn mean_kl(reports: &[AttackReport]) -> f64 {
    if reports.is_empty() {
        return f64::NAN;
    }
    reports.iter().map(|r| r.kl_divergence).sum::<f64>() / reports.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_layer(in_dim: usize, out_dim: usize, f: Activation, seed: u64) -> LayerParams {
        let mut rng = SplitMix64::new(seed);
        let w = Matrix::from_fn(in_dim, out_dim, |_, _| rng.uniform(-1.0, 1.0));
        let b = (0..out_dim).map(|_| rng.uniform(-0.5, 0.5)).collect();
        LayerParams::new(w, b, f).unwrap()
    }

    fn random_x(n: usize, seed: u64) -> Vec<f64> {
        let mut rng = SplitMix64::new(seed);
        (0..n).map(|_| rng.uniform(0.0, 1.0)).collect()
    }

    #[test]
    fn exact_linear_recovery() {
        let layer = random_layer(8, 12, Activation::Linear, 1);
        let x = random_x(8, 2);
        let x_hat = invert_exact(&layer.forward(&x).unwrap(), &layer).unwrap();
        assert!(relative_l2(&x, &x_hat).unwrap() < 1e-9);
    }

    #[test]
    fn exact_sigmoid_recovery() {
        let layer = random_layer(8, 12, Activation::Sigmoid, 3);
        let x = random_x(8, 4);
        let x_hat = invert_exact(&layer.forward(&x).unwrap(), &layer).unwrap();
        assert!(relative_l2(&x, &x_hat).unwrap() < 1e-6);
    }

    #[test]
    fn exact_rejects_rectifier_and_dropped_sigmoid() {
        let layer = random_layer(4, 6, Activation::Rectifier, 5);
        let a = layer.forward(&random_x(4, 6)).unwrap();
        assert!(matches!(invert_exact(&a, &layer), Err(AttackError::StrategyInapplicable(_))));
        let layer = random_layer(4, 6, Activation::Sigmoid, 5);
        let mut a = layer.forward(&random_x(4, 6)).unwrap();
        a[2] = 0.0;
        assert!(matches!(invert_exact(&a, &layer), Err(AttackError::OutOfRange { index: 2, .. })));
    }

    #[test]
    fn pinv_mode_without_drops_is_exact() {
        let layer = random_layer(5, 9, Activation::Linear, 7);
        let x = random_x(5, 8);
        let a = layer.forward(&x).unwrap();
        let x_hat = invert_dropped(&a, &layer, InversionMode::PseudoInverse).unwrap();
        assert!(relative_l2(&x, &x_hat).unwrap() < 1e-9);
    }

    #[test]
    fn transpose_output_is_rescaled() {
        let layer = random_layer(5, 9, Activation::Sigmoid, 9);
        let a = layer.forward(&random_x(5, 10)).unwrap();
        let x_hat = invert_dropped(&a, &layer, InversionMode::Transpose).unwrap();
        let min = x_hat.iter().copied().fold(f64::INFINITY, f64::min);
        let max = x_hat.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        assert_eq!((min, max), (0.0, 1.0));
    }

    #[test]
    fn rectifier_chain_checks_kinds() {
        let l1 = random_layer(4, 6, Activation::Rectifier, 11);
        let l2 = random_layer(6, 6, Activation::ramp(0.2).unwrap(), 12);
        let a = l2.forward(&l1.forward(&random_x(4, 13)).unwrap()).unwrap();
        let x_hat = invert_rectifier(&a, &[l1.clone(), l2], InversionMode::Transpose).unwrap();
        assert_eq!(x_hat.len(), 4);
        let sig = random_layer(4, 6, Activation::Sigmoid, 14);
        assert!(invert_rectifier(&a, &[sig], InversionMode::Transpose).is_err());
    }

    #[test]
    fn all_ones_connection_mask_is_lossless() {
        let layer = random_layer(3, 5, Activation::Linear, 15);
        let x = random_x(3, 16);
        let d = Matrix::from_fn(3, 5, |_, _| 1.0);
        let (x_tilde, dev) = dropping_connections_leak(&x, &layer, &d).unwrap();
        assert!(dev < 1e-12, "{dev}");
        assert_eq!(x_tilde.len(), 3);
    }

    #[test]
    fn brute_force_cost_examples() {
        assert_eq!(brute_force_cost(101, 4).total_combinations, BigUint::from(104_060_401u64));
        assert_eq!(brute_force_cost(100, 4).total_combinations, BigUint::from(100_000_000u64));
        assert_eq!(brute_force_cost(7, 0).total_combinations, BigUint::one());
        let big = brute_force_cost(1000, 100).total_combinations;
        assert_eq!(big, BigUint::from(10u32).pow(300));
        let d = brute_force_cost(100, 4).projected_duration(1e6).unwrap();
        assert_eq!(d, Duration::from_secs(100));
    }

    #[test]
    fn overlap_examples() {
        assert_eq!(overlap_probability(10, 0).unwrap(), 1.0);
        assert!((overlap_probability(4, 2).unwrap() - 1.0 / 6.0).abs() < 1e-15);
        assert!(overlap_probability(5, 3).is_err());
        let direct = (796.0 * 795.0 * 794.0 * 793.0) / (800.0 * 799.0 * 798.0 * 797.0);
        assert!((overlap_probability(800, 4).unwrap() - direct).abs() < 1e-12);
    }

    #[test]
    fn overlap_decreases_in_m() {
        let ps: Vec<f64> = (0..=50).map(|m| overlap_probability(100, m).unwrap()).collect();
        assert!(ps.windows(2).all(|w| w[1] < w[0]));
    }

    #[test]
    fn strategy_names_round_trip() {
        for s in Strategy::ALL {
            assert_eq!(s.name().parse::<Strategy>().unwrap(), s);
        }
        assert!("nope".parse::<Strategy>().is_err());
    }

    #[test]
    fn toy_instance_is_solved_by_enumeration() {
        let toy = toy_brute_force_instance(6, 8, 1, 11, 3).unwrap();
        assert_eq!(toy.dropped.len(), 1);
        assert_eq!(toy.a_hat[toy.dropped[0]], 0.0);
        let out = brute_force_attack(&toy.a_hat, &toy.layer, &toy.grid).unwrap();
        assert_eq!(out.dropped, toy.dropped);
        assert!(relative_l2(&toy.x, &out.x_hat).unwrap() < EXACT_RELATIVE_L2);
        assert!(toy_brute_force_instance(8, 8, 1, 11, 3).is_err());
    }
}
