//! Plain-text `key=value` run configuration.
//!
//! Blank lines and lines starting with `#` are ignored. Every key has a
//! default; unknown or repeated keys are rejected. [`RunConfig::to_text`]
//! writes every key back out, and parsing that text reproduces the config.

use std::fmt::Write as _;
use std::str::FromStr;

use thiserror::Error;

use crate::encoder::{EncoderConfig, LayerKind};
use crate::model::ModelConfig;
use crate::objective::{IntermediateLossSpec, Variant};
use crate::trainer::{SyntheticTaskConfig, TrainConfig};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConfigError {
    #[error("line {line}: expected `key=value`, got `{text}`")]
    Syntax { line: usize, text: String },
    #[error("unknown config key `{0}`")]
    UnknownKey(String),
    #[error("config key `{0}` given more than once")]
    DuplicateKey(String),
    #[error("invalid value `{value}` for `{key}`: {reason}")]
    InvalidValue { key: String, value: String, reason: String },
    #[error("inconsistent config: {0}")]
    Inconsistent(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum VariantKind {
    None,
    Middle,
    Lower,
    Multiple,
    Random,
    Stochastic,
}

impl FromStr for VariantKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s {
            "none" => VariantKind::None,
            "middle" => VariantKind::Middle,
            "lower" => VariantKind::Lower,
            "multiple" => VariantKind::Multiple,
            "random" => VariantKind::Random,
            "stochastic" => VariantKind::Stochastic,
            _ => return Err("expected none|middle|lower|multiple|random|stochastic".into()),
        })
    }
}

impl VariantKind {
    fn name(self) -> &'static str {
        match self {
            VariantKind::None => "none",
            VariantKind::Middle => "middle",
            VariantKind::Lower => "lower",
            VariantKind::Multiple => "multiple",
            VariantKind::Random => "random",
            VariantKind::Stochastic => "stochastic",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossConfig {
    pub variant: VariantKind,
    pub w: f64,
    /// Number of intermediate losses for `multiple`.
    pub k: usize,
    /// Layer for `lower`; 0 selects `⌊L/4⌋`.
    pub position: usize,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            variant: VariantKind::Middle,
            w: 0.3,
            k: 1,
            position: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    /// `input_dim` is ignored here; it always follows `task.dim`.
    pub model: EncoderConfig,
    pub shared_head: bool,
    pub loss: LossConfig,
    pub task: SyntheticTaskConfig,
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let task = SyntheticTaskConfig::default();
        Self {
            model: EncoderConfig {
                input_dim: task.dim,
                ..Default::default()
            },
            shared_head: true,
            loss: LossConfig::default(),
            task,
            train: TrainConfig::default(),
        }
    }
}

fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T, ConfigError>
where
    T::Err: std::fmt::Display,
{
    value.parse().map_err(|e: T::Err| ConfigError::InvalidValue {
        key: key.to_string(),
        value: value.to_string(),
        reason: e.to_string(),
    })
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = Self::default();
        let mut seen = std::collections::HashSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(ConfigError::Syntax {
                    line: i + 1,
                    text: raw.to_string(),
                });
            };
            let (key, value) = (key.trim(), value.trim());
            cfg.set(key, value)?;
            if !seen.insert(key.to_string()) {
                return Err(ConfigError::DuplicateKey(key.to_string()));
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Applies one `key=value` pair without validating the whole config.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        let v = value;
        match key {
            "model.kind" => self.model.kind = parse_value::<LayerKind>(key, v)?,
            "model.layers" => self.model.layers = parse_value(key, v)?,
            "model.d_model" => self.model.d_model = parse_value(key, v)?,
            "model.heads" => self.model.heads = parse_value(key, v)?,
            "model.d_ff" => self.model.d_ff = parse_value(key, v)?,
            "model.conv_kernel" => self.model.conv_kernel = parse_value(key, v)?,
            "model.p_last" => self.model.p_last = parse_value(key, v)?,
            "model.shared_head" => self.shared_head = parse_value(key, v)?,
            "loss.variant" => self.loss.variant = parse_value(key, v)?,
            "loss.w" => self.loss.w = parse_value(key, v)?,
            "loss.k" => self.loss.k = parse_value(key, v)?,
            "loss.position" => self.loss.position = parse_value(key, v)?,
            "task.vocab" => self.task.vocab = parse_value(key, v)?,
            "task.dim" => self.task.dim = parse_value(key, v)?,
            "task.min_labels" => self.task.min_labels = parse_value(key, v)?,
            "task.max_labels" => self.task.max_labels = parse_value(key, v)?,
            "task.min_duration" => self.task.min_duration = parse_value(key, v)?,
            "task.max_duration" => self.task.max_duration = parse_value(key, v)?,
            "task.noise" => self.task.noise = parse_value(key, v)?,
            "task.train_size" => self.task.train_size = parse_value(key, v)?,
            "task.dev_size" => self.task.dev_size = parse_value(key, v)?,
            "task.test_size" => self.task.test_size = parse_value(key, v)?,
            "task.seed" => self.task.seed = parse_value(key, v)?,
            "train.epochs" => self.train.epochs = parse_value(key, v)?,
            "train.batch" => self.train.batch = parse_value(key, v)?,
            "train.seed" => self.train.seed = parse_value(key, v)?,
            "train.average_last" => self.train.average_last = parse_value(key, v)?,
            "train.warmup" => self.train.warmup = parse_value(key, v)?,
            "train.lr_factor" => self.train.lr_factor = parse_value(key, v)?,
            _ => return Err(ConfigError::UnknownKey(key.to_string())),
        }
        self.model.input_dim = self.task.dim;
        Ok(())
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let inconsistent = |e: &dyn std::fmt::Display| ConfigError::Inconsistent(e.to_string());
        self.model.validate().map_err(|e| inconsistent(&e))?;
        self.task.validate().map_err(|e| inconsistent(&e))?;
        self.train.validate().map_err(|e| inconsistent(&e))?;
        self.loss_spec()
            .validate(self.model.layers)
            .map_err(|e| inconsistent(&e))?;
        Ok(())
    }

    pub fn loss_spec(&self) -> IntermediateLossSpec {
        let layers = self.model.layers;
        let variant = match self.loss.variant {
            VariantKind::None => Variant::None,
            VariantKind::Middle => Variant::Middle,
            VariantKind::Lower if self.loss.position == 0 => Variant::Lower((layers / 4).max(1)),
            VariantKind::Lower => Variant::Lower(self.loss.position),
            VariantKind::Multiple => Variant::Multiple(self.loss.k),
            VariantKind::Random => Variant::Random,
            VariantKind::Stochastic => Variant::Stochastic,
        };
        IntermediateLossSpec {
            variant,
            weight: self.loss.w,
        }
    }

    /// Model structure; initialization is seeded from `train.seed`.
    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            encoder: EncoderConfig {
                input_dim: self.task.dim,
                ..self.model.clone()
            },
            vocab: self.task.vocab,
            shared_head: self.shared_head,
            seed: self.train.seed,
        }
    }

    /// Every key, one `key=value` line each, in a fixed order.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let mut put = |k: &str, v: &dyn std::fmt::Display| {
            writeln!(out, "{k}={v}").expect("write to string");
        };
        put("model.kind", &self.model.kind.name());
        put("model.layers", &self.model.layers);
        put("model.d_model", &self.model.d_model);
        put("model.heads", &self.model.heads);
        put("model.d_ff", &self.model.d_ff);
        put("model.conv_kernel", &self.model.conv_kernel);
        put("model.p_last", &self.model.p_last);
        put("model.shared_head", &self.shared_head);
        put("loss.variant", &self.loss.variant.name());
        put("loss.w", &self.loss.w);
        put("loss.k", &self.loss.k);
        put("loss.position", &self.loss.position);
        put("task.vocab", &self.task.vocab);
        put("task.dim", &self.task.dim);
        put("task.min_labels", &self.task.min_labels);
        put("task.max_labels", &self.task.max_labels);
        put("task.min_duration", &self.task.min_duration);
        put("task.max_duration", &self.task.max_duration);
        put("task.noise", &self.task.noise);
        put("task.train_size", &self.task.train_size);
        put("task.dev_size", &self.task.dev_size);
        put("task.test_size", &self.task.test_size);
        put("task.seed", &self.task.seed);
        put("train.epochs", &self.train.epochs);
        put("train.batch", &self.train.batch);
        put("train.seed", &self.train.seed);
        put("train.average_last", &self.train.average_last);
        put("train.warmup", &self.train.warmup);
        put("train.lr_factor", &self.train.lr_factor);
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_carry_paper_hyperparameters() {
        let cfg = RunConfig::parse("").unwrap();
        assert_eq!(cfg.loss.w, 0.3);
        assert_eq!(cfg.model.p_last, 0.7);
        assert_eq!(cfg.loss_spec().variant, Variant::Middle);
        assert_eq!(cfg.model.layers, 4);
        assert_eq!(cfg.train.average_last, 5);
    }

    #[test]
    fn parses_keys_and_comments() {
        let cfg = RunConfig::parse(
            "# hard setting\nmodel.layers = 8\nmodel.kind=conformer\n\nloss.variant=multiple\nloss.k=3\ntask.noise=0.5\n",
        )
        .unwrap();
        assert_eq!(cfg.model.layers, 8);
        assert_eq!(cfg.model.kind, LayerKind::Conformer);
        assert_eq!(cfg.loss_spec().variant, Variant::Multiple(3));
        assert_eq!(cfg.task.noise, 0.5);
    }

    #[test]
    fn lower_defaults_to_quarter_depth() {
        let cfg = RunConfig::parse("model.layers=12\nloss.variant=lower").unwrap();
        assert_eq!(cfg.loss_spec().variant, Variant::Lower(3));
        let cfg = RunConfig::parse("model.layers=12\nloss.variant=lower\nloss.position=2").unwrap();
        assert_eq!(cfg.loss_spec().variant, Variant::Lower(2));
    }

    #[test]
    fn rejects_bad_input() {
        assert_eq!(
            RunConfig::parse("model.depth=3"),
            Err(ConfigError::UnknownKey("model.depth".into()))
        );
        assert!(matches!(
            RunConfig::parse("model.layers"),
            Err(ConfigError::Syntax { line: 1, .. })
        ));
        assert!(matches!(
            RunConfig::parse("model.layers=x"),
            Err(ConfigError::InvalidValue { .. })
        ));
        assert!(matches!(
            RunConfig::parse("model.layers=2\nmodel.layers=3"),
            Err(ConfigError::DuplicateKey(_))
        ));
        assert!(matches!(
            RunConfig::parse("model.heads=5"),
            Err(ConfigError::Inconsistent(_))
        ));
        assert!(matches!(
            RunConfig::parse("loss.w=2"),
            Err(ConfigError::Inconsistent(_))
        ));
    }

    #[test]
    fn echo_round_trips() {
        let cfg =
            RunConfig::parse("model.p_last=0.123456789\nloss.variant=stochastic\ntrain.lr_factor=2.5\ntask.seed=99")
                .unwrap();
        assert_eq!(RunConfig::parse(&cfg.to_text()).unwrap(), cfg);
        assert_eq!(
            RunConfig::parse(&RunConfig::default().to_text()).unwrap(),
            RunConfig::default()
        );
    }
}
