//! Privacy and utility metrics: image KL divergence, reconstruction error and
//! accuracy sweeps under dropped activations.

use std::fmt::Write as _;

use thiserror::Error;

use crate::data::Dataset;
use crate::linalg::{self, Matrix};
use crate::network::{argmax, count_correct, MlpModel, NetworkError};
use crate::rng::{derive_seed, stream};
use crate::splitexec::make_mask;

/// Smoothing added to every normalized pixel before the KL divergence.
pub const KL_EPSILON: f64 = 1e-7;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MetricsError {
    #[error("length mismatch: {0} vs {1}")]
    Length(usize, usize),
    #[error("empty input")]
    Empty,
    #[error("reference vector has zero norm")]
    ZeroReference,
    #[error("trials must be >= 1")]
    NoTrials,
    #[error("drop probability {0} must be in [0, 1)")]
    Probability(f64),
    #[error(transparent)]
    Network(#[from] NetworkError),
}

pub type Result<T, E = MetricsError> = std::result::Result<T, E>;

/// Turns an image into a distribution: shift to min 0, scale to sum 1, add
/// [`KL_EPSILON`] and renormalize. A constant image becomes uniform.
pub fn image_distribution(v: &[f64]) -> Vec<f64> {
    let min = v.iter().copied().fold(f64::INFINITY, f64::min);
    let mut p: Vec<f64> = v.iter().map(|x| x - min).collect();
    let sum: f64 = p.iter().sum();
    if sum > 0.0 {
        p.iter_mut().for_each(|x| *x /= sum);
    }
    p.iter_mut().for_each(|x| *x += KL_EPSILON);
    let total: f64 = p.iter().sum();
    p.iter_mut().for_each(|x| *x /= total);
    p
}

/// `KL(x ‖ x_hat)` of the two images viewed as distributions (see
/// [`image_distribution`]). The original comes first.
pub fn kl_divergence_image(x: &[f64], x_hat: &[f64]) -> Result<f64> {
    if x.len() != x_hat.len() {
        return Err(MetricsError::Length(x.len(), x_hat.len()));
    }
    if x.is_empty() {
        return Err(MetricsError::Empty);
    }
    let p = image_distribution(x);
    let q = image_distribution(x_hat);
    let kl: f64 = p.iter().zip(&q).map(|(&pi, &qi)| pi * (pi / qi).ln()).sum();
    // Rounding can leave a tiny negative sum for near-identical inputs.
    Ok(kl.max(0.0))
}

/// `‖x − x_hat‖ / ‖x‖`.
pub fn relative_l2(x: &[f64], x_hat: &[f64]) -> Result<f64> {
    if x.len() != x_hat.len() {
        return Err(MetricsError::Length(x.len(), x_hat.len()));
    }
    let reference = linalg::norm(x);
    if reference == 0.0 {
        return Err(MetricsError::ZeroReference);
    }
    let diff: f64 = x.iter().zip(x_hat).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
    Ok(diff / reference)
}

/// Affine map onto `[0, 1]`; a constant vector maps to zeros.
pub fn min_max_rescale(v: &[f64]) -> Vec<f64> {
    let min = v.iter().copied().fold(f64::INFINITY, f64::min);
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let range = max - min;
    if range > 0.0 {
        v.iter().map(|x| (x - min) / range).collect()
    } else {
        vec![0.0; v.len()]
    }
}

/// Accuracy statistics for one drop probability. Accuracies are fractions.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub p: f64,
    pub mean: f64,
    /// Population standard deviation over trials; `None` for `p = 0`.
    pub std: Option<f64>,
    pub max: Option<f64>,
    pub min: Option<f64>,
    pub trials: usize,
}

impl SweepRow {
    fn from_trials(p: f64, accs: &[f64]) -> Self {
        let n = accs.len() as f64;
        let mean = accs.iter().sum::<f64>() / n;
        let var = accs.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / n;
        let max = accs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let min = accs.iter().copied().fold(f64::INFINITY, f64::min);
        Self {
            p,
            mean: mean.clamp(min, max),
            std: Some(var.sqrt()),
            max: Some(max),
            min: Some(min),
            trials: accs.len(),
        }
    }
}

const SWEEP_CHUNK: usize = 1000;

/// [`drop_sweep_at`] with activations dropped after the first layer.
pub fn drop_sweep(model: &MlpModel, data: &Dataset, ps: &[f64], trials: usize, seed: u64) -> Result<Vec<SweepRow>> {
    drop_sweep_at(model, data, 1, ps, trials, seed)
}

/// Test accuracy when `round(p * width)` outputs of layer `cut - 1` are
/// zeroed. Each trial draws a fresh mask for every sample, seeded from
/// `(seed, p, trial, sample)`. The `p = 0` row is plain [`crate::evaluate`].
pub fn drop_sweep_at(
    model: &MlpModel,
    data: &Dataset,
    cut: usize,
    ps: &[f64],
    trials: usize,
    seed: u64,
) -> Result<Vec<SweepRow>> {
    if trials == 0 {
        return Err(MetricsError::NoTrials);
    }
    if let Some(&p) = ps.iter().find(|p| !(0.0..1.0).contains(*p)) {
        return Err(MetricsError::Probability(p));
    }
    if data.is_empty() {
        return Err(NetworkError::EmptyDataset.into());
    }
    let (front, rear) = model.split_at(cut)?;
    let hidden = front.forward_batch_raw(data.images())?;
    let width = hidden.cols();

    let mut rows = Vec::with_capacity(ps.len());
    for &p in ps {
        if p == 0.0 {
            let acc = count_correct(model, data.images(), data.labels())? as f64 / data.len() as f64;
            rows.push(SweepRow {
                p,
                mean: acc,
                std: None,
                max: None,
                min: None,
                trials: 1,
            });
            continue;
        }
        let mut accs = Vec::with_capacity(trials);
        for trial in 0..trials {
            let mut correct = 0;
            for start in (0..data.len()).step_by(SWEEP_CHUNK) {
                let end = (start + SWEEP_CHUNK).min(data.len());
                let idx: Vec<usize> = (start..end).collect();
                let mut chunk: Matrix = hidden.select_rows(&idx);
                for (r, i) in idx.iter().enumerate() {
                    let s = derive_seed(seed, &[stream::SWEEP, p.to_bits(), trial as u64, *i as u64]);
                    make_mask(width, p, s).apply(chunk.row_mut(r));
                }
                let out = rear.forward_batch_raw(&chunk)?;
                correct += (0..out.rows()).filter(|&r| argmax(out.row(r)) == data.label(idx[r])).count();
            }
            accs.push(correct as f64 / data.len() as f64);
        }
        rows.push(SweepRow::from_trials(p, &accs));
    }
    Ok(rows)
}

/// CSV with columns `p,mean,std,max,min`; absent values are written `NA`.
pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let opt = |v: Option<f64>| v.map_or_else(|| "NA".to_string(), |v| format!("{v:.6}"));
    let mut out = String::from("p,mean,std,max,min\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{:.6},{},{},{}",
            r.p,
            r.mean,
            opt(r.std),
            opt(r.max),
            opt(r.min)
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn kl_of_identical_images_is_zero() {
        let x = [0.0, 0.3, 1.0, 0.5];
        assert_eq!(kl_divergence_image(&x, &x).unwrap(), 0.0);
    }

    #[test]
    fn kl_two_pixel_hand_computation() {
        // p: uniform; q: [1, 0] shifted, normalized and smoothed.
        let e = KL_EPSILON;
        let q0 = (1.0 + e) / (1.0 + 2.0 * e);
        let q1 = e / (1.0 + 2.0 * e);
        let expected = 0.5 * (0.5 / q0).ln() + 0.5 * (0.5 / q1).ln();
        let got = kl_divergence_image(&[0.7, 0.7], &[1.0, 0.0]).unwrap();
        assert!((got - expected).abs() < 1e-12, "{got} vs {expected}");
    }

    #[test]
    fn kl_length_mismatch() {
        assert_eq!(kl_divergence_image(&[1.0], &[1.0, 2.0]), Err(MetricsError::Length(1, 2)));
    }

    #[test]
    fn relative_l2_examples() {
        assert_eq!(relative_l2(&[3.0, 4.0], &[3.0, 4.0]).unwrap(), 0.0);
        assert!((relative_l2(&[3.0, 4.0], &[0.0, 0.0]).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(relative_l2(&[0.0], &[1.0]), Err(MetricsError::ZeroReference));
    }

    #[test]
    fn rescale_examples() {
        assert_eq!(min_max_rescale(&[2.0, 4.0, 3.0]), vec![0.0, 1.0, 0.5]);
        assert_eq!(min_max_rescale(&[5.0, 5.0]), vec![0.0, 0.0]);
    }

    #[test]
    fn single_trial_row() {
        let r = SweepRow::from_trials(0.01, &[0.9]);
        assert_eq!(r.std, Some(0.0));
        assert_eq!((r.min, r.max), (Some(0.9), Some(0.9)));
        assert_eq!(r.mean, 0.9);
    }

    #[test]
    fn csv_marks_missing_values() {
        let rows = [
            SweepRow {
                p: 0.0,
                mean: 0.98,
                std: None,
                max: None,
                min: None,
                trials: 1,
            },
            SweepRow::from_trials(0.005, &[0.97, 0.99]),
        ];
        let csv = sweep_csv(&rows);
        let lines: Vec<_> = csv.lines().collect();
        assert_eq!(lines[0], "p,mean,std,max,min");
        assert_eq!(lines[1], "0,0.980000,NA,NA,NA");
        assert_eq!(lines[2], "0.005,0.980000,0.010000,0.990000,0.970000");
    }

    proptest! {
        #[test]
        fn kl_non_negative(x in prop::collection::vec(0.0f64..1.0, 2..50), seed: u64) {
            let mut rng = crate::rng::SplitMix64::new(seed);
            let y: Vec<f64> = x.iter().map(|_| rng.uniform(-2.0, 2.0)).collect();
            prop_assert!(kl_divergence_image(&x, &y).unwrap() >= 0.0);
        }

        #[test]
        fn kl_joint_scale_invariant(x in prop::collection::vec(0.0f64..1.0, 2..50), c in 0.1f64..10.0) {
            let y: Vec<f64> = x.iter().rev().copied().collect();
            let xs: Vec<f64> = x.iter().map(|v| v * c).collect();
            let ys: Vec<f64> = y.iter().map(|v| v * c).collect();
            let a = kl_divergence_image(&x, &y).unwrap();
            let b = kl_divergence_image(&xs, &ys).unwrap();
            prop_assert!((a - b).abs() <= 1e-9 * (1.0 + a.abs()));
        }
    }
}
