//! Flat `section.key = value` configuration with presets and overrides.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use splitinfer_core::splitexec::{DropPolicy, MaskSeeding, SplitPlan};
use splitinfer_core::{Activation, Architecture, TrainConfig};

use crate::error::CliError;

pub const PRESETS: [(&str, &str); 6] = [
    ("smoke", include_str!("../../../presets/smoke.conf")),
    ("desk-mnist", include_str!("../../../presets/desk-mnist.conf")),
    ("desk-mnist-sigmoid", include_str!("../../../presets/desk-mnist-sigmoid.conf")),
    ("desk-mnist-ramp02", include_str!("../../../presets/desk-mnist-ramp02.conf")),
    ("desk-mnist-ramp005", include_str!("../../../presets/desk-mnist-ramp005.conf")),
    ("paper-mnist", include_str!("../../../presets/paper-mnist.conf")),
];

/// Every accepted key with its default and a one-line description.
pub const KEYS: &[(&str, &str, &str)] = &[
    ("data.source", "mnist", "mnist, blobs or xor"),
    ("data.dir", "", "MNIST directory; empty means $SPLITINFER_DATA_DIR or the built-in fallbacks"),
    ("data.train_limit", "0", "use only the first N training samples (0 = all)"),
    ("data.test_limit", "0", "use only the first N test samples (0 = all)"),
    ("data.blobs.classes", "4", "number of blob classes"),
    ("data.blobs.per_class", "200", "samples per class"),
    ("data.blobs.dim", "16", "input dimension"),
    ("data.blobs.noise", "0.25", "noise standard deviation"),
    ("data.blobs.seed", "7", "blob generator seed; the test split uses seed + 1"),
    ("model.hidden", "128,128,128", "hidden layer widths"),
    ("model.activation", "rectifier", "hidden activation: linear, sigmoid, tanh, rectifier, ramp:<v>"),
    ("model.first_activation", "", "activation of the first layer if it differs"),
    ("model.seed", "1", "weight initialization seed"),
    ("train.epochs", "1", "training epochs"),
    ("train.batch_size", "500", "mini-batch size"),
    ("train.lr", "0.0001", "Adam learning rate"),
    ("train.beta1", "0.9", "Adam beta1"),
    ("train.beta2", "0.999", "Adam beta2"),
    ("train.eps", "1e-8", "Adam epsilon"),
    ("train.dropout", "", "training dropout on each layer's input, comma separated"),
    ("train.lr_scale", "", "per-layer learning-rate multipliers, comma separated"),
    ("train.seed", "1", "shuffle and dropout seed"),
    ("split.cut", "1", "number of layers kept on the client"),
    ("split.policy", "none", "none, drop-activations, drop-connections or noise"),
    ("split.p", "0.005", "fraction of outputs (or weights) affected"),
    ("split.seeding", "data-max", "mask seeding: data-max or per-query"),
    ("split.sigma", "0.1", "noise standard deviation for the noise policy"),
    ("split.query_seed", "0", "base seed for per-query masks"),
    ("sweep.ps", "0,0.005,0.01,0.02,0.03,0.05,0.1", "drop probabilities"),
    ("sweep.trials", "30", "trials per probability"),
    ("sweep.seed", "1", "mask seed"),
    ("attack.samples", "100", "test samples to attack"),
    ("attack.images", "true", "write PGM images of originals and reconstructions"),
    ("attack.queries", "20", "queries per sample for the repeated-query attack"),
    ("attack.grid_points", "11", "grid size of the toy brute-force attack"),
    ("attack.seed", "1", "seed of the toy brute-force instance"),
    ("wire.addr", "127.0.0.1:7878", "server address"),
    ("wire.timeout_ms", "10000", "client connect and read timeout"),
    ("wire.training", "false", "accept split-training requests"),
    ("wire.tls", "false", "TLS transport (not available in this build)"),
    ("output.dir", "runs/default", "where models, CSVs and images go"),
];

/// Raw key/value pairs, validated against [`KEYS`].
#[derive(Debug, Clone, PartialEq)]
pub struct RawConfig {
    values: BTreeMap<String, String>,
    /// Where each non-default value came from.
    origin: BTreeMap<String, String>,
}

impl Default for RawConfig {
    fn default() -> Self {
        Self {
            values: KEYS.iter().map(|(k, v, _)| (k.to_string(), v.to_string())).collect(),
            origin: BTreeMap::new(),
        }
    }
}

fn known(key: &str) -> bool {
    KEYS.iter().any(|(k, _, _)| *k == key)
}

pub fn preset_text(name: &str) -> Option<&'static str> {
    PRESETS.iter().find(|(n, _)| *n == name).map(|(_, t)| *t)
}

impl RawConfig {
    pub fn set(&mut self, key: &str, value: &str, origin: &str) -> Result<(), CliError> {
        let key = key.trim();
        if !known(key) {
            return Err(CliError::config(key, format!("unknown key (from {origin})")));
        }
        self.values.insert(key.to_string(), value.trim().to_string());
        self.origin.insert(key.to_string(), origin.to_string());
        Ok(())
    }

    /// Applies `key = value` lines; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str, origin: &str) -> Result<(), CliError> {
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                CliError::config(line, format!("{origin}:{}: expected `key = value`", n + 1))
            })?;
            self.set(k, v, &format!("{origin}:{}", n + 1))?;
        }
        Ok(())
    }

    pub fn apply_preset(&mut self, name: &str) -> Result<(), CliError> {
        let text = preset_text(name).ok_or_else(|| {
            let names: Vec<_> = PRESETS.iter().map(|(n, _)| *n).collect();
            CliError::config("preset", format!("unknown preset `{name}` (have {})", names.join(", ")))
        })?;
        self.apply_text(text, &format!("preset {name}"))
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<(), CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::config("config", format!("cannot read {}: {e}", path.display())))?;
        self.apply_text(&text, &path.display().to_string())
    }

    /// `key=value` from the command line.
    pub fn apply_override(&mut self, kv: &str) -> Result<(), CliError> {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| CliError::config(kv, "override must look like key=value"))?;
        self.set(k, v, "--set")
    }

    pub fn get(&self, key: &str) -> &str {
        self.values.get(key).map(String::as_str).expect("key is listed in KEYS")
    }

    /// The resolved configuration as a config file.
    pub fn render(&self) -> String {
        let mut out = String::new();
        for (k, _, desc) in KEYS {
            let v = self.get(k);
            let _ = match self.origin.get(*k) {
                Some(o) => writeln!(out, "{k} = {v}  # {desc} [{o}]"),
                None => writeln!(out, "{k} = {v}  # {desc}"),
            };
        }
        out
    }

    fn parse<T: FromStr>(&self, key: &str) -> Result<T, CliError>
    where
        T::Err: std::fmt::Display,
    {
        let v = self.get(key);
        v.parse()
            .map_err(|e: T::Err| CliError::config(key, format!("cannot parse `{v}`: {e}")))
    }

    fn list<T: FromStr>(&self, key: &str) -> Result<Vec<T>, CliError>
    where
        T::Err: std::fmt::Display,
    {
        let v = self.get(key);
        if v.is_empty() {
            return Ok(Vec::new());
        }
        v.split(',')
            .map(|s| {
                s.trim()
                    .parse()
                    .map_err(|e: T::Err| CliError::config(key, format!("cannot parse `{s}`: {e}")))
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum DataSource {
    Mnist { dir: Option<PathBuf> },
    Blobs { classes: usize, per_class: usize, dim: usize, noise: f64, seed: u64 },
    Xor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DataConfig {
    pub source: DataSource,
    pub train_limit: usize,
    pub test_limit: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub first_activation: Option<Activation>,
    pub seed: u64,
}

impl ModelConfig {
    pub fn architecture(&self, input_dim: usize, classes: usize) -> Architecture {
        let arch = Architecture::mlp(input_dim, &self.hidden, self.activation, classes);
        match self.first_activation {
            Some(f) => arch.with_first_activation(f),
            None => arch,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepConfig {
    pub ps: Vec<f64>,
    pub trials: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttackConfig {
    pub samples: usize,
    pub images: bool,
    pub queries: usize,
    pub grid_points: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WireConfig {
    pub addr: String,
    pub timeout_ms: u64,
    pub training: bool,
}

/// Fully validated configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub plan: SplitPlan,
    pub query_seed: u64,
    pub sweep: SweepConfig,
    pub attack: AttackConfig,
    pub wire: WireConfig,
    pub output_dir: PathBuf,
}

fn activation(raw: &RawConfig, key: &str) -> Result<Option<Activation>, CliError> {
    let v = raw.get(key);
    if v.is_empty() {
        return Ok(None);
    }
    v.parse()
        .map(Some)
        .map_err(|e| CliError::config(key, format!("{e}")))
}

fn probability(key: &str, p: f64) -> Result<f64, CliError> {
    if !(0.0..1.0).contains(&p) {
        return Err(CliError::config(key, format!("{p} is not in [0, 1)")));
    }
    Ok(p)
}

impl ExperimentConfig {
    pub fn from_raw(raw: &RawConfig) -> Result<Self, CliError> {
        let source = match raw.get("data.source") {
            "mnist" => {
                let d = raw.get("data.dir");
                DataSource::Mnist {
                    dir: (!d.is_empty()).then(|| PathBuf::from(d)),
                }
            }
            "blobs" => DataSource::Blobs {
                classes: raw.parse("data.blobs.classes")?,
                per_class: raw.parse("data.blobs.per_class")?,
                dim: raw.parse("data.blobs.dim")?,
                noise: raw.parse("data.blobs.noise")?,
                seed: raw.parse("data.blobs.seed")?,
            },
            "xor" => DataSource::Xor,
            other => {
                return Err(CliError::config(
                    "data.source",
                    format!("`{other}` is not mnist, blobs or xor"),
                ))
            }
        };
        let data = DataConfig {
            source,
            train_limit: raw.parse("data.train_limit")?,
            test_limit: raw.parse("data.test_limit")?,
        };

        let hidden: Vec<usize> = raw.list("model.hidden")?;
        if hidden.contains(&0) {
            return Err(CliError::config("model.hidden", "layer widths must be >= 1"));
        }
        let model = ModelConfig {
            hidden,
            activation: activation(raw, "model.activation")?
                .ok_or_else(|| CliError::config("model.activation", "must not be empty"))?,
            first_activation: activation(raw, "model.first_activation")?,
            seed: raw.parse("model.seed")?,
        };
        let layers = model.hidden.len() + 1;

        let train = TrainConfig {
            batch_size: raw.parse("train.batch_size")?,
            epochs: raw.parse("train.epochs")?,
            learning_rate: raw.parse("train.lr")?,
            beta1: raw.parse("train.beta1")?,
            beta2: raw.parse("train.beta2")?,
            epsilon: raw.parse("train.eps")?,
            dropout: raw.list("train.dropout")?,
            lr_scale: raw.list("train.lr_scale")?,
            seed: raw.parse("train.seed")?,
        };
        if train.batch_size == 0 {
            return Err(CliError::config("train.batch_size", "must be >= 1"));
        }
        if !(train.learning_rate >= 0.0 && train.learning_rate.is_finite()) {
            return Err(CliError::config("train.lr", "must be finite and >= 0"));
        }
        for (key, b) in [("train.beta1", train.beta1), ("train.beta2", train.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(CliError::config(key, format!("{b} is not in [0, 1)")));
            }
        }
        if !(train.epsilon > 0.0) {
            return Err(CliError::config("train.eps", "must be > 0"));
        }
        for &p in &train.dropout {
            probability("train.dropout", p)?;
        }
        if train.dropout.len() > layers {
            return Err(CliError::config(
                "train.dropout",
                format!("{} entries for a {layers}-layer model", train.dropout.len()),
            ));
        }
        if let Some(s) = train.lr_scale.iter().find(|s| !(s.is_finite() && **s >= 0.0)) {
            return Err(CliError::config("train.lr_scale", format!("{s} must be finite and >= 0")));
        }

        let cut: usize = raw.parse("split.cut")?;
        if cut == 0 || cut >= layers {
            return Err(CliError::config(
                "split.cut",
                format!("{cut} must be between 1 and {} for this model", layers - 1),
            ));
        }
        let p = probability("split.p", raw.parse("split.p")?)?;
        let sigma: f64 = raw.parse("split.sigma")?;
        if !(sigma >= 0.0 && sigma.is_finite()) {
            return Err(CliError::config("split.sigma", "must be finite and >= 0"));
        }
        let policy = match raw.get("split.policy") {
            "none" => DropPolicy::None,
            "drop-activations" => DropPolicy::DropActivations { p },
            "drop-connections" => DropPolicy::DropConnections { p },
            "noise" => DropPolicy::AddNoise { p, sigma },
            other => {
                return Err(CliError::config(
                    "split.policy",
                    format!("`{other}` is not none, drop-activations, drop-connections or noise"),
                ))
            }
        };
        let seeding = match raw.get("split.seeding") {
            "data-max" => MaskSeeding::DataMax,
            "per-query" => MaskSeeding::PerQueryRandom,
            other => {
                return Err(CliError::config(
                    "split.seeding",
                    format!("`{other}` is not data-max or per-query"),
                ))
            }
        };

        let ps: Vec<f64> = raw.list("sweep.ps")?;
        for &p in &ps {
            probability("sweep.ps", p)?;
        }
        let sweep = SweepConfig {
            ps,
            trials: raw.parse("sweep.trials")?,
            seed: raw.parse("sweep.seed")?,
        };
        if sweep.trials == 0 {
            return Err(CliError::config("sweep.trials", "must be >= 1"));
        }

        let attack = AttackConfig {
            samples: raw.parse("attack.samples")?,
            images: raw.parse("attack.images")?,
            queries: raw.parse("attack.queries")?,
            grid_points: raw.parse("attack.grid_points")?,
            seed: raw.parse("attack.seed")?,
        };
        if attack.grid_points == 0 {
            return Err(CliError::config("attack.grid_points", "must be >= 1"));
        }

        if raw.parse::<bool>("wire.tls")? {
            return Err(CliError::config("wire.tls", "TLS is not available in this build"));
        }
        let wire = WireConfig {
            addr: raw.get("wire.addr").to_string(),
            timeout_ms: raw.parse("wire.timeout_ms")?,
            training: raw.parse("wire.training")?,
        };

        Ok(Self {
            data,
            model,
            train,
            plan: SplitPlan::new(cut, policy, seeding),
            query_seed: raw.parse("split.query_seed")?,
            sweep,
            attack,
            wire,
            output_dir: PathBuf::from(raw.get("output.dir")),
        })
    }
}
