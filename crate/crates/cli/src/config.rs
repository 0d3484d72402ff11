//! Run configuration: `key = value` lines, `#` comments, dotted keys.

use std::fmt::Display;
use std::path::PathBuf;
use std::str::FromStr;

use avseg_core::inference::InferenceConfig;
use avseg_core::network::NetworkConfig;
use avseg_core::preprocess::PreprocessConfig;
use avseg_core::training::{DecayMode, LossWeights, TrainConfig};

/// Environment variable naming the default config file.
pub const CONFIG_ENV: &str = "AVSEG_CONFIG";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub data_root: PathBuf,
    pub out_root: PathBuf,
    pub seed: u64,
    pub network: NetworkConfig,
    pub train: TrainConfig,
    pub precision: Precision,
    pub log_every: usize,
    pub checkpoint_every: usize,
    pub loss: LossWeights,
    pub preprocess: PreprocessConfig,
    pub inference: InferenceConfig,
    /// Reject label colors outside the color table instead of mapping them to
    /// background.
    pub strict_labels: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            data_root: PathBuf::from("data"),
            out_root: PathBuf::from("runs"),
            seed: 0,
            network: NetworkConfig::default(),
            train: TrainConfig::default(),
            precision: Precision::F32,
            log_every: 10,
            checkpoint_every: 500,
            loss: LossWeights::default(),
            preprocess: PreprocessConfig::default(),
            inference: InferenceConfig::default(),
            strict_labels: true,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("line {line}: expected `key = value`")]
    Syntax { line: usize },
    #[error("unknown config key `{0}`")]
    UnknownKey(String),
    #[error("config key `{key}`: cannot parse `{value}`")]
    BadValue { key: String, value: String },
    #[error("config: {0}")]
    Invalid(String),
}

/// Every key with its one-line description, in emission order.
pub const KEYS: &[(&str, &str)] = &[
    ("data_root", "dataset root (manifest.txt, images/, labels/, optional fov/)"),
    ("out_root", "output root for runs"),
    ("seed", "seed for parameter initialisation and patch sampling"),
    ("network.input_channels", "leading input-stack channels used (3 = RGB, 8 = full stack)"),
    ("network.base_width", "channels of the first encoder stage"),
    ("network.sigma", "spatial activation strength (0 disables the boost)"),
    ("network.patch", "training and inference patch size (multiple of 8)"),
    ("network.multitask", "separate vessel branch feeding the A/V head"),
    ("network.activation", "spatial activation of A/V features by the vessel map"),
    ("network.deep_supervision", "side-output losses on encoder stages"),
    ("network.detach_activation", "stop gradients through the activation map"),
    ("train.batch", "patches per update"),
    ("train.iterations", "total updates"),
    ("train.lr", "initial learning rate"),
    ("train.halving_period", "iterations between learning-rate halvings"),
    ("train.momentum", "SGD momentum"),
    ("train.decay", "weight decay placement: loss | optimizer"),
    ("train.literal_bce", "positive-only BCE instead of the two-sided form"),
    ("train.precision", "training arithmetic: f32 | f64"),
    ("train.log_every", "iterations between run-log lines"),
    ("train.checkpoint_every", "iterations between checkpoints"),
    ("loss.vessel", "vessel class weight"),
    ("loss.artery", "artery class weight"),
    ("loss.vein", "vein class weight"),
    ("loss.lambda", "weight decay coefficient"),
    ("preprocess.background_sigma", "illumination background blur sigma, or auto for max(H, W) / 30"),
    ("preprocess.gabor.scales", "Gabor scales in pixels"),
    ("preprocess.gabor.orientations", "Gabor orientations in degrees"),
    ("preprocess.gabor.elongation", "Gabor elongation"),
    ("preprocess.gabor.frequency", "Gabor frequency vector (two values)"),
    ("preprocess.line.window", "line detector window (odd)"),
    ("preprocess.line.lengths", "line lengths (odd, <= window)"),
    ("preprocess.line.orientations", "line orientations in degrees"),
    ("inference.stride", "tile stride in pixels"),
    ("inference.tile_batch", "tiles per forward pass"),
    ("inference.threshold", "vessel probability threshold"),
    ("evaluation.strict_labels", "reject unknown label colors"),
];

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T, ConfigError> {
    value.parse().map_err(|_| ConfigError::BadValue { key: key.into(), value: value.into() })
}

fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>, ConfigError> {
    value.split(',').map(|v| parse(key, v.trim())).collect()
}

fn list<T: Display>(v: &[T]) -> String {
    v.iter().map(ToString::to_string).collect::<Vec<_>>().join(", ")
}

fn float_list(v: &[f64]) -> String {
    v.iter().map(|x| format!("{x:?}")).collect::<Vec<_>>().join(", ")
}

impl RunConfig {
    /// Current value of `key` in its file representation.
    pub fn get(&self, key: &str) -> Result<String, ConfigError> {
        let f = |v: f64| format!("{v:?}");
        let p = &self.preprocess;
        Ok(match key {
            "data_root" => self.data_root.display().to_string(),
            "out_root" => self.out_root.display().to_string(),
            "seed" => self.seed.to_string(),
            "network.input_channels" => self.network.input_channels.to_string(),
            "network.base_width" => self.network.base_width.to_string(),
            "network.sigma" => f(self.network.sigma),
            "network.patch" => self.network.patch.to_string(),
            "network.multitask" => self.network.multitask.to_string(),
            "network.activation" => self.network.activation.to_string(),
            "network.deep_supervision" => self.network.deep_supervision.to_string(),
            "network.detach_activation" => self.network.detach_activation.to_string(),
            "train.batch" => self.train.batch.to_string(),
            "train.iterations" => self.train.iterations.to_string(),
            "train.lr" => f(self.train.lr),
            "train.halving_period" => self.train.halving_period.to_string(),
            "train.momentum" => f(self.train.momentum),
            "train.decay" => match self.train.decay {
                DecayMode::LossTerm => "loss".into(),
                DecayMode::Optimizer => "optimizer".into(),
            },
            "train.literal_bce" => self.train.literal_bce.to_string(),
            "train.precision" => match self.precision {
                Precision::F32 => "f32".into(),
                Precision::F64 => "f64".into(),
            },
            "train.log_every" => self.log_every.to_string(),
            "train.checkpoint_every" => self.checkpoint_every.to_string(),
            "loss.vessel" => f(self.loss.vessel),
            "loss.artery" => f(self.loss.artery),
            "loss.vein" => f(self.loss.vein),
            "loss.lambda" => f(self.loss.lambda),
            "preprocess.background_sigma" => p.background_sigma.map_or_else(|| "auto".into(), f),
            "preprocess.gabor.scales" => float_list(&p.gabor.scales),
            "preprocess.gabor.orientations" => float_list(&p.gabor.orientations),
            "preprocess.gabor.elongation" => f(p.gabor.elongation),
            "preprocess.gabor.frequency" => float_list(&[p.gabor.frequency.0, p.gabor.frequency.1]),
            "preprocess.line.window" => p.line.window.to_string(),
            "preprocess.line.lengths" => list(&p.line.lengths),
            "preprocess.line.orientations" => float_list(&p.line.orientations),
            "inference.stride" => self.inference.stride.to_string(),
            "inference.tile_batch" => self.inference.tile_batch.to_string(),
            "inference.threshold" => f(self.inference.threshold),
            "evaluation.strict_labels" => self.strict_labels.to_string(),
            _ => return Err(ConfigError::UnknownKey(key.into())),
        })
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        let k = key;
        let p = &mut self.preprocess;
        match key {
            "data_root" => self.data_root = PathBuf::from(value),
            "out_root" => self.out_root = PathBuf::from(value),
            "seed" => self.seed = parse(k, value)?,
            "network.input_channels" => self.network.input_channels = parse(k, value)?,
            "network.base_width" => self.network.base_width = parse(k, value)?,
            "network.sigma" => self.network.sigma = parse(k, value)?,
            "network.patch" => self.network.patch = parse(k, value)?,
            "network.multitask" => self.network.multitask = parse(k, value)?,
            "network.activation" => self.network.activation = parse(k, value)?,
            "network.deep_supervision" => self.network.deep_supervision = parse(k, value)?,
            "network.detach_activation" => self.network.detach_activation = parse(k, value)?,
            "train.batch" => self.train.batch = parse(k, value)?,
            "train.iterations" => self.train.iterations = parse(k, value)?,
            "train.lr" => self.train.lr = parse(k, value)?,
            "train.halving_period" => self.train.halving_period = parse(k, value)?,
            "train.momentum" => self.train.momentum = parse(k, value)?,
            "train.decay" => {
                self.train.decay = match value {
                    "loss" => DecayMode::LossTerm,
                    "optimizer" => DecayMode::Optimizer,
                    _ => return Err(ConfigError::BadValue { key: k.into(), value: value.into() }),
                }
            }
            "train.literal_bce" => self.train.literal_bce = parse(k, value)?,
            "train.precision" => {
                self.precision = match value {
                    "f32" => Precision::F32,
                    "f64" => Precision::F64,
                    _ => return Err(ConfigError::BadValue { key: k.into(), value: value.into() }),
                }
            }
            "train.log_every" => self.log_every = parse(k, value)?,
            "train.checkpoint_every" => self.checkpoint_every = parse(k, value)?,
            "loss.vessel" => self.loss.vessel = parse(k, value)?,
            "loss.artery" => self.loss.artery = parse(k, value)?,
            "loss.vein" => self.loss.vein = parse(k, value)?,
            "loss.lambda" => self.loss.lambda = parse(k, value)?,
            "preprocess.background_sigma" => {
                p.background_sigma = if value == "auto" { None } else { Some(parse(k, value)?) }
            }
            "preprocess.gabor.scales" => p.gabor.scales = parse_list(k, value)?,
            "preprocess.gabor.orientations" => p.gabor.orientations = parse_list(k, value)?,
            "preprocess.gabor.elongation" => p.gabor.elongation = parse(k, value)?,
            "preprocess.gabor.frequency" => {
                let v: Vec<f64> = parse_list(k, value)?;
                let [a, b] = v[..] else {
                    return Err(ConfigError::BadValue { key: k.into(), value: value.into() });
                };
                p.gabor.frequency = (a, b);
            }
            "preprocess.line.window" => p.line.window = parse(k, value)?,
            "preprocess.line.lengths" => p.line.lengths = parse_list(k, value)?,
            "preprocess.line.orientations" => p.line.orientations = parse_list(k, value)?,
            "inference.stride" => self.inference.stride = parse(k, value)?,
            "inference.tile_batch" => self.inference.tile_batch = parse(k, value)?,
            "inference.threshold" => self.inference.threshold = parse(k, value)?,
            "evaluation.strict_labels" => self.strict_labels = parse(k, value)?,
            _ => return Err(ConfigError::UnknownKey(key.into())),
        }
        Ok(())
    }

    /// Applies `key = value` lines on top of `self`.
    pub fn apply_text(&mut self, text: &str) -> Result<(), ConfigError> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or(ConfigError::Syntax { line: i + 1 })?;
            let (k, v) = (k.trim(), v.trim());
            if k.is_empty() {
                return Err(ConfigError::Syntax { line: i + 1 });
            }
            self.set(k, v)?;
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = Self::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    /// Full effective configuration, one commented key per entry.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (key, doc) in KEYS {
            let value = self.get(key).expect("every listed key is readable");
            out.push_str(&format!("# {doc}\n{key} = {value}\n"));
        }
        out
    }

    /// Cross-field checks plus the owning modules' own validation.
    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |e: avseg_core::Error| ConfigError::Invalid(e.to_string());
        self.network.validate().map_err(invalid)?;
        self.train.validate().map_err(invalid)?;
        self.loss.validate().map_err(invalid)?;
        self.preprocess.gabor.validate().map_err(invalid)?;
        self.preprocess.line.validate().map_err(invalid)?;
        if self.preprocess.background_sigma.is_some_and(|s| !(s > 0.0)) {
            return Err(ConfigError::Invalid("background sigma must be positive".into()));
        }
        let inf = &self.inference;
        if inf.stride == 0 || inf.stride > self.network.patch || inf.tile_batch == 0 {
            return Err(ConfigError::Invalid(format!(
                "inference stride {} must lie in 1..={} and tile batch must be positive",
                inf.stride, self.network.patch
            )));
        }
        if !(inf.threshold > 0.0 && inf.threshold < 1.0) {
            return Err(ConfigError::Invalid(format!("threshold {} outside (0, 1)", inf.threshold)));
        }
        if self.log_every == 0 || self.checkpoint_every == 0 {
            return Err(ConfigError::Invalid("log and checkpoint intervals must be positive".into()));
        }
        Ok(())
    }

    /// Training config with the run seed applied.
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig { seed: self.seed, ..self.train.clone() }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let cfg = RunConfig::default();
        let text = cfg.to_text();
        assert_eq!(RunConfig::parse(&text).unwrap(), cfg);
        cfg.validate().unwrap();
    }

    #[test]
    fn every_key_is_listed_once() {
        let mut seen = std::collections::HashSet::new();
        let mut cfg = RunConfig::default();
        for (k, _) in KEYS {
            assert!(seen.insert(*k), "{k} listed twice");
            let v = cfg.get(k).unwrap();
            cfg.set(k, &v).unwrap();
        }
        assert_eq!(cfg, RunConfig::default());
    }

    #[test]
    fn edited_values_round_trip() {
        let text = "seed = 7\nnetwork.sigma = 0.3  # weaker boost\n\n[ignored]=1\n";
        assert!(RunConfig::parse(text).is_err());
        let text = "seed = 7\nnetwork.sigma = 0.3  # weaker boost\ntrain.decay = optimizer\n\
                    preprocess.background_sigma = 4.5\npreprocess.gabor.frequency = 0.5, 2.5\n\
                    train.precision = f64\nloss.lambda = 1e-4\n";
        let cfg = RunConfig::parse(text).unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.network.sigma, 0.3);
        assert_eq!(cfg.train.decay, DecayMode::Optimizer);
        assert_eq!(cfg.preprocess.background_sigma, Some(4.5));
        assert_eq!(cfg.preprocess.gabor.frequency, (0.5, 2.5));
        assert_eq!(cfg.precision, Precision::F64);
        assert_eq!(RunConfig::parse(&cfg.to_text()).unwrap(), cfg);
    }

    #[test]
    fn rejects_unknown_keys_and_bad_values() {
        assert!(matches!(RunConfig::parse("network.depth = 5"), Err(ConfigError::UnknownKey(_))));
        assert!(matches!(RunConfig::parse("train.lr = fast"), Err(ConfigError::BadValue { .. })));
        assert!(matches!(RunConfig::parse("seed 5"), Err(ConfigError::Syntax { line: 1 })));
        assert!(matches!(RunConfig::parse("train.decay = both"), Err(ConfigError::BadValue { .. })));
    }

    #[test]
    fn validate_catches_cross_field_errors() {
        let mut cfg = RunConfig::default();
        cfg.inference.stride = 100;
        assert!(cfg.validate().is_err());
        let mut cfg = RunConfig::default();
        cfg.loss.vessel = 0.9;
        assert!(cfg.validate().is_err());
    }
}
