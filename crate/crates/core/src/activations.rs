//! Element-wise activation functions, their derivatives and (approximate) inverses.

use std::fmt;
use std::str::FromStr;

use thiserror::Error;

/// Margin used by the clamped inverses: a sigmoid output is only inverted when
/// it lies in `(0, 1 − ε)`, a tanh output when it lies in `(−1 + ε, 1 − ε)`.
/// Outputs closer to 1 than `ε` no longer determine their pre-activation to
/// useful precision; small sigmoid outputs do, down to the smallest float.
pub const INVERSE_CLAMP: f64 = 1e-12;

/// Ramp threshold presets.
pub const RAMP_V_WIDE: f64 = 0.2;
pub const RAMP_V_NARROW: f64 = 0.05;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ActivationError {
    #[error("ramp threshold must be finite and > 0, got {0}")]
    BadRampThreshold(f64),
    #[error("unknown activation `{0}`")]
    Unknown(String),
    #[error("unknown activation tag {0}")]
    UnknownTag(u8),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Activation {
    Linear,
    Sigmoid,
    Tanh,
    /// `max(0, z)`
    Rectifier,
    /// `min(max(0, z), threshold)`
    Ramp { threshold: f64 },
}

impl Activation {
    pub fn ramp(threshold: f64) -> Result<Self, ActivationError> {
        if threshold.is_finite() && threshold > 0.0 {
            Ok(Activation::Ramp { threshold })
        } else {
            Err(ActivationError::BadRampThreshold(threshold))
        }
    }

    #[inline]
    pub fn eval(self, z: f64) -> f64 {
        match self {
            Activation::Linear => z,
            Activation::Sigmoid => sigmoid(z),
            Activation::Tanh => z.tanh(),
            Activation::Rectifier => {
                if z > 0.0 {
                    z
                } else {
                    0.0
                }
            }
            Activation::Ramp { threshold } => {
                if z <= 0.0 {
                    0.0
                } else if z >= threshold {
                    threshold
                } else {
                    z
                }
            }
        }
    }

    /// `f'(z)`. Rectifier and ramp use 0 at their kinks.
    #[inline]
    pub fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::Linear => 1.0,
            Activation::Sigmoid => {
                let s = sigmoid(z);
                s * (1.0 - s)
            }
            Activation::Tanh => {
                let t = z.tanh();
                1.0 - t * t
            }
            Activation::Rectifier => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Ramp { threshold } => {
                if z > 0.0 && z < threshold {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }

    pub fn apply(self, z: &[f64]) -> Vec<f64> {
        z.iter().map(|&v| self.eval(v)).collect()
    }

    pub fn apply_in_place(self, z: &mut [f64]) {
        if self != Activation::Linear {
            z.iter_mut().for_each(|v| *v = self.eval(*v));
        }
    }

    /// True for the activations that are bijective onto their range.
    pub fn is_invertible(self) -> bool {
        matches!(self, Activation::Linear | Activation::Sigmoid | Activation::Tanh)
    }

    /// Exact inverse; `None` if `a` is outside the clamped open range.
    pub fn inverse(self, a: f64) -> Option<f64> {
        match self {
            Activation::Linear => Some(a),
            Activation::Sigmoid => (a > 0.0 && a < 1.0 - INVERSE_CLAMP).then(|| (a / (1.0 - a)).ln()),
            Activation::Tanh => (a > -1.0 + INVERSE_CLAMP && a < 1.0 - INVERSE_CLAMP).then(|| a.atanh()),
            Activation::Rectifier | Activation::Ramp { .. } => None,
        }
    }

    /// Attacker-side inverse. Sigmoid and tanh invert in range and map
    /// out-of-range outputs (such as a dropped 0.0 from a sigmoid) to 0.
    /// Linear, rectifier and ramp return `a` unchanged.
    #[inline]
    pub fn approx_inverse_scalar(self, a: f64) -> f64 {
        match self {
            Activation::Sigmoid | Activation::Tanh => self.inverse(a).unwrap_or(0.0),
            Activation::Linear | Activation::Rectifier | Activation::Ramp { .. } => a,
        }
    }

    pub fn approx_inverse(self, a: &[f64]) -> Vec<f64> {
        a.iter().map(|&v| self.approx_inverse_scalar(v)).collect()
    }

    /// Tag used in the model file.
    pub fn tag(self) -> u8 {
        match self {
            Activation::Linear => 0,
            Activation::Sigmoid => 1,
            Activation::Tanh => 2,
            Activation::Rectifier => 3,
            Activation::Ramp { .. } => 4,
        }
    }

    /// Extra parameter stored next to the tag (the ramp threshold, else 0).
    pub fn param(self) -> f64 {
        match self {
            Activation::Ramp { threshold } => threshold,
            _ => 0.0,
        }
    }

    pub fn from_tag(tag: u8, param: f64) -> Result<Self, ActivationError> {
        match tag {
            0 => Ok(Activation::Linear),
            1 => Ok(Activation::Sigmoid),
            2 => Ok(Activation::Tanh),
            3 => Ok(Activation::Rectifier),
            4 => Activation::ramp(param),
            other => Err(ActivationError::UnknownTag(other)),
        }
    }
}

#[inline]
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Activation::Linear => f.write_str("linear"),
            Activation::Sigmoid => f.write_str("sigmoid"),
            Activation::Tanh => f.write_str("tanh"),
            Activation::Rectifier => f.write_str("rectifier"),
            Activation::Ramp { threshold } => write!(f, "ramp:{threshold}"),
        }
    }
}

impl FromStr for Activation {
    type Err = ActivationError;

    /// Accepts `linear`, `sigmoid`, `tanh`, `rectifier` (or `relu`) and `ramp:<v>`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim();
        match s.to_ascii_lowercase().as_str() {
            "linear" | "identity" => Ok(Activation::Linear),
            "sigmoid" => Ok(Activation::Sigmoid),
            "tanh" => Ok(Activation::Tanh),
            "rectifier" | "relu" => Ok(Activation::Rectifier),
            "ramp" => Activation::ramp(RAMP_V_WIDE),
            other => match other.strip_prefix("ramp:") {
                Some(v) => {
                    let v: f64 = v.parse().map_err(|_| ActivationError::Unknown(s.to_string()))?;
                    Activation::ramp(v)
                }
                None => Err(ActivationError::Unknown(s.to_string())),
            },
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const ALL: [Activation; 5] = [
        Activation::Linear,
        Activation::Sigmoid,
        Activation::Tanh,
        Activation::Rectifier,
        Activation::Ramp { threshold: RAMP_V_WIDE },
    ];

    #[test]
    fn forward_examples() {
        assert_eq!(Activation::Sigmoid.apply(&[0.0]), vec![0.5]);
        assert_eq!(Activation::ramp(0.2).unwrap().apply(&[-1.0, 0.1, 0.5]), vec![0.0, 0.1, 0.2]);
        assert_eq!(Activation::Rectifier.apply(&[-3.0, 0.0, 2.0]), vec![0.0, 0.0, 2.0]);
    }

    #[test]
    fn inverse_examples() {
        assert_eq!(Activation::Sigmoid.approx_inverse(&[0.5]), vec![0.0]);
        // A dropped output of exactly zero has no preimage; it maps to 0.
        assert_eq!(Activation::Sigmoid.approx_inverse(&[0.0]), vec![0.0]);
        assert_eq!(Activation::Sigmoid.approx_inverse(&[1.0]), vec![0.0]);
        assert_eq!(Activation::Tanh.approx_inverse(&[1.0, -1.0]), vec![0.0, 0.0]);
        let a = Activation::Sigmoid.apply(&[1.7]);
        assert!((Activation::Sigmoid.approx_inverse(&a)[0] - 1.7).abs() < 1e-10);
        assert_eq!(Activation::Rectifier.approx_inverse(&[0.0, 2.5]), vec![0.0, 2.5]);
    }

    #[test]
    fn ramp_rejects_non_positive_threshold() {
        assert!(Activation::ramp(0.0).is_err());
        assert!(Activation::ramp(-0.1).is_err());
        assert!(Activation::ramp(f64::NAN).is_err());
    }

    #[test]
    fn derivative_kinks_are_zero() {
        let ramp = Activation::ramp(0.2).unwrap();
        assert_eq!(ramp.derivative(0.0), 0.0);
        assert_eq!(ramp.derivative(0.2), 0.0);
        assert_eq!(ramp.derivative(0.1), 1.0);
        assert_eq!(Activation::Rectifier.derivative(0.0), 0.0);
    }

    #[test]
    fn parse_round_trip() {
        for a in ALL {
            assert_eq!(a.to_string().parse::<Activation>().unwrap(), a);
            assert_eq!(Activation::from_tag(a.tag(), a.param()).unwrap(), a);
        }
        assert_eq!("relu".parse::<Activation>().unwrap(), Activation::Rectifier);
        assert!("softplus".parse::<Activation>().is_err());
        assert!(Activation::from_tag(9, 0.0).is_err());
    }

    proptest! {
        #[test]
        fn invertible_round_trip(z in -5.0f64..5.0) {
            for a in [Activation::Linear, Activation::Sigmoid, Activation::Tanh] {
                let back = a.approx_inverse_scalar(a.eval(z));
                prop_assert!((back - z).abs() < 1e-9, "{a}: {z} -> {back}");
            }
        }

        #[test]
        fn ramp_range(z in -10.0f64..10.0, v in 0.01f64..2.0) {
            let out = Activation::ramp(v).unwrap().eval(z);
            prop_assert!((0.0..=v).contains(&out));
        }

        #[test]
        fn rectifier_idempotent(z in prop::collection::vec(-10.0f64..10.0, 1..20)) {
            let once = Activation::Rectifier.apply(&z);
            let twice = Activation::Rectifier.apply(&once);
            prop_assert_eq!(once, twice);
        }

        #[test]
        fn monotone(a in -20.0f64..20.0, b in -20.0f64..20.0) {
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            for f in ALL {
                prop_assert!(f.eval(lo) <= f.eval(hi));
            }
        }
    }
}
