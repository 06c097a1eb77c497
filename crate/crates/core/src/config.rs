//! Experiment configuration.
//!
//! Files are TOML with flat dotted keys, e.g.
//!
//! ```toml
//! task = "synthetic_dg"
//! variant = "ND"
//! steps = 5000
//! loss.lambda_kl = 1.0
//! data.separation = 10.0
//! ```
//!
//! Resolution order: task/variant defaults, then file keys, then overrides
//! (flags win). Unknown keys and ill-typed values are rejected with an
//! error naming the key.

use std::collections::BTreeMap;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use toml::Value;

use crate::data::SyntheticParams;
use crate::error::{Error, Result};
use crate::model::ModelSpec;
use crate::nn::{Activation, MlpSpec};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    ToyRegression,
    SyntheticDg,
}

impl std::str::FromStr for Task {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "toy_regression" => Ok(Task::ToyRegression),
            "synthetic_dg" => Ok(Task::SyntheticDg),
            _ => Err(Error::config("task", format!("unknown task `{s}`"))),
        }
    }
}

impl std::fmt::Display for Task {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Task::ToyRegression => "toy_regression",
            Task::SyntheticDg => "synthetic_dg",
        })
    }
}

/// Training variant.
///
/// * `DL`: domain labels available; ERM target loss plus the domain loss.
/// * `ND`: no domain information; ERM, entropy, balance and adversarial losses.
/// * `MU`: as `ND`, but the target loss switches to intra-domain mixup once
///   the routing has become sparse.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Variant {
    DL,
    ND,
    MU,
}

impl std::str::FromStr for Variant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "DL" => Ok(Variant::DL),
            "ND" => Ok(Variant::ND),
            "MU" => Ok(Variant::MU),
            _ => Err(Error::config("variant", format!("unknown variant `{s}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_y: f64,
    pub lambda_en: f64,
    pub lambda_kl: f64,
    pub lambda_ad: f64,
    pub lambda_d: f64,
}

impl LossWeights {
    pub fn for_variant(v: Variant) -> Self {
        match v {
            Variant::DL => LossWeights {
                lambda_y: 1.0,
                lambda_en: 0.0,
                lambda_kl: 0.0,
                lambda_ad: 0.0,
                lambda_d: 1.0,
            },
            Variant::ND | Variant::MU => LossWeights {
                lambda_y: 1.0,
                lambda_en: 1.0,
                lambda_kl: 1.0,
                lambda_ad: 0.1,
                lambda_d: 0.0,
            },
        }
    }

    pub fn zero() -> Self {
        LossWeights {
            lambda_y: 0.0,
            lambda_en: 0.0,
            lambda_kl: 0.0,
            lambda_ad: 0.0,
            lambda_d: 0.0,
        }
    }

    fn entries(&self) -> [(&'static str, f64); 5] {
        [
            ("loss.lambda_y", self.lambda_y),
            ("loss.lambda_en", self.lambda_en),
            ("loss.lambda_kl", self.lambda_kl),
            ("loss.lambda_ad", self.lambda_ad),
            ("loss.lambda_d", self.lambda_d),
        ]
    }
}

/// Hidden-layer widths of every sub-network. Input and output sizes follow
/// from the data and from `k`/`d`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkShapes {
    pub featurizer_hidden: Vec<usize>,
    pub feature_dim: usize,
    pub encoder_hidden: Vec<usize>,
    pub classifier_hidden: Vec<usize>,
    pub hyper_hidden: Vec<usize>,
    pub adversary_hidden: Vec<usize>,
    pub activation: Activation,
    pub adversary_activation: Activation,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    pub synthetic: SyntheticParams,
    pub train_fraction: f64,
    /// Fraction of training examples whose domain label the domain loss may see.
    pub domain_label_fraction: f64,
    /// Optional dataset CSV replacing the generated data.
    pub path: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub task: Task,
    pub variant: Variant,
    pub k: usize,
    pub d: usize,
    pub eps: f64,
    pub net: NetworkShapes,
    pub loss: LossWeights,
    pub steps: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub eval_interval: usize,
    pub mixup_alpha: f64,
    pub switch_threshold: f64,
    /// Momentum of the moving average of the entropy loss used by the switch.
    pub switch_momentum: f64,
    pub output_dir: PathBuf,
    pub data: DataConfig,
}

const KEYS: &[&str] = &[
    "task",
    "variant",
    "k",
    "d",
    "eps",
    "steps",
    "lr",
    "batch_size",
    "seed",
    "eval_interval",
    "mixup_alpha",
    "switch_threshold",
    "switch_momentum",
    "output_dir",
    "loss.lambda_y",
    "loss.lambda_en",
    "loss.lambda_kl",
    "loss.lambda_ad",
    "loss.lambda_d",
    "net.featurizer_hidden",
    "net.feature_dim",
    "net.encoder_hidden",
    "net.classifier_hidden",
    "net.hyper_hidden",
    "net.adversary_hidden",
    "net.activation",
    "net.adversary_activation",
    "data.domains",
    "data.classes",
    "data.n_per",
    "data.separation",
    "data.lift_dim",
    "data.train_fraction",
    "data.domain_label_fraction",
    "data.path",
];

impl ExperimentConfig {
    /// Defaults for a task and variant.
    ///
    /// `toy_regression`: three embeddings with D = 8, 32-unit SiLU MLPs,
    /// λ_y = λ_en = λ_kl = 1, Adam at 0.001 for 20 000 steps on batches of 32.
    /// `synthetic_dg`: K = 3, λ_ad = 0.1, mixup α = 0.3, tanh hidden units,
    /// 5 000 steps with batches of 64 per domain.
    pub fn defaults(task: Task, variant: Variant) -> Self {
        match task {
            Task::ToyRegression => {
                let mut loss = LossWeights::for_variant(variant);
                // no classes to be adversarial about
                loss.lambda_ad = 0.0;
                ExperimentConfig {
                    task,
                    variant,
                    k: 3,
                    d: 8,
                    eps: crate::gating::DEFAULT_EPS,
                    net: NetworkShapes {
                        featurizer_hidden: vec![32, 32],
                        feature_dim: 32,
                        encoder_hidden: vec![32, 32],
                        classifier_hidden: vec![32],
                        hyper_hidden: vec![32, 32, 32],
                        adversary_hidden: vec![32, 32],
                        activation: Activation::Silu,
                        adversary_activation: Activation::Relu,
                    },
                    loss,
                    steps: 20_000,
                    lr: 1e-3,
                    batch_size: 32,
                    seed: 0,
                    eval_interval: 100,
                    mixup_alpha: 0.3,
                    switch_threshold: 0.1,
                    switch_momentum: 0.9,
                    output_dir: PathBuf::from("runs/toy_regression"),
                    data: DataConfig {
                        synthetic: SyntheticParams::default(),
                        train_fraction: 1.0,
                        domain_label_fraction: 1.0,
                        path: None,
                    },
                }
            }
            Task::SyntheticDg => {
                let synthetic = SyntheticParams::default();
                ExperimentConfig {
                    task,
                    variant,
                    k: if variant == Variant::DL {
                        synthetic.domains
                    } else {
                        3
                    },
                    d: 8,
                    eps: crate::gating::DEFAULT_EPS,
                    net: NetworkShapes {
                        featurizer_hidden: vec![64, 64],
                        feature_dim: 32,
                        encoder_hidden: vec![64, 64],
                        classifier_hidden: vec![],
                        hyper_hidden: vec![64, 64, 32],
                        adversary_hidden: vec![64, 64],
                        activation: Activation::Tanh,
                        adversary_activation: Activation::Relu,
                    },
                    loss: LossWeights::for_variant(variant),
                    steps: 5_000,
                    lr: 1e-3,
                    batch_size: 64 * synthetic.domains,
                    seed: 0,
                    eval_interval: 100,
                    mixup_alpha: 0.3,
                    switch_threshold: 0.1,
                    switch_momentum: 0.9,
                    output_dir: PathBuf::from("runs/synthetic_dg"),
                    data: DataConfig {
                        synthetic,
                        train_fraction: 0.8,
                        domain_label_fraction: 1.0,
                        path: None,
                    },
                }
            }
        }
    }

    /// Resolves a config from optional TOML text and `key=value` overrides.
    pub fn resolve(text: Option<&str>, overrides: &[(String, String)]) -> Result<Self> {
        let mut entries: BTreeMap<String, Value> = BTreeMap::new();
        if let Some(text) = text {
            let table: toml::Table = text
                .parse()
                .map_err(|e: toml::de::Error| Error::config("<file>", e.message().to_string()))?;
            flatten("", &Value::Table(table), &mut entries);
        }
        let mut layered: Vec<(String, Value)> = entries.into_iter().collect();
        for (key, raw) in overrides {
            layered.push((key.clone(), parse_scalar(raw)));
        }
        for (key, _) in &layered {
            if !KEYS.contains(&key.as_str()) {
                return Err(Error::config(key, "unknown key"));
            }
        }

        let last = |name: &str| {
            layered
                .iter()
                .rev()
                .find(|(k, _)| k == name)
                .map(|(_, v)| v)
        };
        let task: Task = match last("task") {
            Some(v) => as_str("task", v)?.parse()?,
            None => Task::ToyRegression,
        };
        let variant: Variant = match last("variant") {
            Some(v) => as_str("variant", v)?.parse()?,
            None => Variant::ND,
        };
        let mut cfg = Self::defaults(task, variant);
        let domains_set = layered.iter().any(|(k, _)| k == "data.domains");
        let k_set = layered.iter().any(|(k, _)| k == "k");
        let batch_set = layered.iter().any(|(k, _)| k == "batch_size");
        for (key, value) in &layered {
            cfg.apply(key, value)?;
        }
        if domains_set && task == Task::SyntheticDg {
            if variant == Variant::DL && !k_set {
                cfg.k = cfg.data.synthetic.domains;
            }
            if !batch_set {
                cfg.batch_size = 64 * cfg.data.synthetic.domains;
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn apply(&mut self, key: &str, v: &Value) -> Result<()> {
        match key {
            "task" | "variant" => {}
            "k" => self.k = as_usize(key, v)?,
            "d" => self.d = as_usize(key, v)?,
            "eps" => self.eps = as_f64(key, v)?,
            "steps" => self.steps = as_usize(key, v)?,
            "lr" => self.lr = as_f64(key, v)?,
            "batch_size" => self.batch_size = as_usize(key, v)?,
            "seed" => self.seed = as_usize(key, v)? as u64,
            "eval_interval" => self.eval_interval = as_usize(key, v)?,
            "mixup_alpha" => self.mixup_alpha = as_f64(key, v)?,
            "switch_threshold" => self.switch_threshold = as_f64(key, v)?,
            "switch_momentum" => self.switch_momentum = as_f64(key, v)?,
            "output_dir" => self.output_dir = PathBuf::from(as_str(key, v)?),
            "loss.lambda_y" => self.loss.lambda_y = as_f64(key, v)?,
            "loss.lambda_en" => self.loss.lambda_en = as_f64(key, v)?,
            "loss.lambda_kl" => self.loss.lambda_kl = as_f64(key, v)?,
            "loss.lambda_ad" => self.loss.lambda_ad = as_f64(key, v)?,
            "loss.lambda_d" => self.loss.lambda_d = as_f64(key, v)?,
            "net.featurizer_hidden" => self.net.featurizer_hidden = as_sizes(key, v)?,
            "net.feature_dim" => self.net.feature_dim = as_usize(key, v)?,
            "net.encoder_hidden" => self.net.encoder_hidden = as_sizes(key, v)?,
            "net.classifier_hidden" => self.net.classifier_hidden = as_sizes(key, v)?,
            "net.hyper_hidden" => self.net.hyper_hidden = as_sizes(key, v)?,
            "net.adversary_hidden" => self.net.adversary_hidden = as_sizes(key, v)?,
            "net.activation" => self.net.activation = as_activation(key, v)?,
            "net.adversary_activation" => self.net.adversary_activation = as_activation(key, v)?,
            "data.domains" => self.data.synthetic.domains = as_usize(key, v)?,
            "data.classes" => self.data.synthetic.classes = as_usize(key, v)?,
            "data.n_per" => self.data.synthetic.n_per = as_usize(key, v)?,
            "data.separation" => self.data.synthetic.separation = as_f64(key, v)?,
            "data.lift_dim" => self.data.synthetic.lift_dim = as_usize(key, v)?,
            "data.train_fraction" => self.data.train_fraction = as_f64(key, v)?,
            "data.domain_label_fraction" => self.data.domain_label_fraction = as_f64(key, v)?,
            "data.path" => self.data.path = Some(PathBuf::from(as_str(key, v)?)),
            _ => return Err(Error::config(key, "unknown key")),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::config("k", "must be >= 1"));
        }
        if self.d == 0 {
            return Err(Error::config("d", "must be >= 1"));
        }
        if !(self.eps > 0.0 && self.eps.is_finite()) {
            return Err(Error::config("eps", "must be positive"));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::config("lr", "must be finite and >= 0"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be >= 1"));
        }
        if self.eval_interval == 0 {
            return Err(Error::config("eval_interval", "must be >= 1"));
        }
        for (key, w) in self.loss.entries() {
            if !(w >= 0.0 && w.is_finite()) {
                return Err(Error::config(key, "loss weights must be finite and >= 0"));
            }
        }
        if self.variant == Variant::MU && !(self.mixup_alpha > 0.0 && self.mixup_alpha.is_finite())
        {
            return Err(Error::config("mixup_alpha", "mixup needs alpha > 0"));
        }
        if !(0.0..1.0).contains(&self.switch_momentum) {
            return Err(Error::config("switch_momentum", "must lie in [0, 1)"));
        }
        if self.task == Task::ToyRegression && self.loss.lambda_ad > 0.0 {
            return Err(Error::config(
                "loss.lambda_ad",
                "class-adversarial training needs a classification task",
            ));
        }
        if self.net.feature_dim == 0 {
            return Err(Error::config("net.feature_dim", "must be >= 1"));
        }
        for (key, sizes) in [
            ("net.featurizer_hidden", &self.net.featurizer_hidden),
            ("net.encoder_hidden", &self.net.encoder_hidden),
            ("net.classifier_hidden", &self.net.classifier_hidden),
            ("net.hyper_hidden", &self.net.hyper_hidden),
            ("net.adversary_hidden", &self.net.adversary_hidden),
        ] {
            if sizes.contains(&0) {
                return Err(Error::config(key, "layer widths must be >= 1"));
            }
        }
        if !(0.0..=1.0).contains(&self.data.train_fraction) {
            return Err(Error::config("data.train_fraction", "must lie in [0, 1]"));
        }
        if !(0.0..=1.0).contains(&self.data.domain_label_fraction) {
            return Err(Error::config(
                "data.domain_label_fraction",
                "must lie in [0, 1]",
            ));
        }
        let s = &self.data.synthetic;
        if s.domains == 0 || s.classes == 0 || s.n_per == 0 || s.lift_dim == 0 {
            return Err(Error::config(
                "data",
                "domains, classes, n_per and lift_dim must be >= 1",
            ));
        }
        if !(s.separation > 0.0) {
            return Err(Error::config("data.separation", "must be positive"));
        }
        Ok(())
    }

    /// Network shapes for data with `input_dim` features and `output_dim` outputs.
    pub fn model_spec(&self, input_dim: usize, output_dim: usize) -> Result<ModelSpec> {
        let net = &self.net;
        let sizes = |input: usize, hidden: &[usize], output: usize| {
            let mut v = vec![input];
            v.extend_from_slice(hidden);
            v.push(output);
            v
        };
        let classifier = MlpSpec::new(
            sizes(net.feature_dim, &net.classifier_hidden, output_dim),
            net.activation,
        )?;
        let spec = ModelSpec {
            featurizer: MlpSpec::new(
                sizes(input_dim, &net.featurizer_hidden, net.feature_dim),
                net.activation,
            )?,
            encoder: MlpSpec::new(
                sizes(input_dim, &net.encoder_hidden, self.d),
                net.activation,
            )?,
            hypernetwork: MlpSpec::new(
                sizes(self.d, &net.hyper_hidden, classifier.param_count()),
                net.activation,
            )?,
            classifier,
            adversary: (self.loss.lambda_ad > 0.0)
                .then(|| {
                    MlpSpec::new(
                        sizes(self.d, &net.adversary_hidden, output_dim),
                        net.adversary_activation,
                    )
                })
                .transpose()?,
            k: self.k,
            eps: self.eps,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn is_classification(&self) -> bool {
        self.task == Task::SyntheticDg
    }
}

fn flatten(prefix: &str, v: &Value, out: &mut BTreeMap<String, Value>) {
    match v {
        Value::Table(t) => {
            for (k, v) in t {
                let key = if prefix.is_empty() {
                    k.clone()
                } else {
                    format!("{prefix}.{k}")
                };
                flatten(&key, v, out);
            }
        }
        other => {
            out.insert(prefix.to_string(), other.clone());
        }
    }
}

/// Parses an override value as a TOML scalar or array, falling back to a bare string.
fn parse_scalar(raw: &str) -> Value {
    format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()))
}

fn type_err(key: &str, want: &str, v: &Value) -> Error {
    Error::config(key, format!("expected {want}, got {}", v.type_str()))
}

fn as_f64(key: &str, v: &Value) -> Result<f64> {
    match v {
        Value::Float(f) => Ok(*f),
        Value::Integer(i) => Ok(*i as f64),
        _ => Err(type_err(key, "a number", v)),
    }
}

fn as_usize(key: &str, v: &Value) -> Result<usize> {
    match v {
        Value::Integer(i) if *i >= 0 => Ok(*i as usize),
        Value::Integer(_) => Err(Error::config(key, "must be non-negative")),
        _ => Err(type_err(key, "an integer", v)),
    }
}

fn as_str<'a>(key: &str, v: &'a Value) -> Result<&'a str> {
    v.as_str().ok_or_else(|| type_err(key, "a string", v))
}

fn as_sizes(key: &str, v: &Value) -> Result<Vec<usize>> {
    match v {
        Value::Array(items) => items.iter().map(|i| as_usize(key, i)).collect(),
        _ => Err(type_err(key, "an array of integers", v)),
    }
}

fn as_activation(key: &str, v: &Value) -> Result<Activation> {
    match as_str(key, v)? {
        "identity" => Ok(Activation::Identity),
        "relu" => Ok(Activation::Relu),
        "silu" => Ok(Activation::Silu),
        "tanh" => Ok(Activation::Tanh),
        other => Err(Error::config(key, format!("unknown activation `{other}`"))),
    }
}
