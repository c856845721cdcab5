use std::fmt::Display;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::eval::ToyKind;
use crate::models::InitTarget;
use crate::ndgrad::{Activation, AdamConfig, MlpSpec};
use crate::schedule::{ScheduleConfig, SigmaTildeRule};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConfigError {
    #[error("line {line}: expected `key = value`, got `{text}`")]
    Syntax { line: usize, text: String },
    #[error("unknown config key `{0}`")]
    UnknownKey(String),
    #[error("invalid value `{value}` for `{key}`: {reason}")]
    InvalidValue { key: String, value: String, reason: String },
    #[error("inconsistent config: {0}")]
    Inconsistent(String),
}

type Result<T> = std::result::Result<T, ConfigError>;

/// How the training pair `(y_t, x_{t+1})` is drawn.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairMode {
    /// Both levels interpolate `x_0` and one shared noise draw.
    #[default]
    Shared,
    /// `x_{t+1} = alpha_{t+1} x_t + sigma_{t+1} e2` with fresh `e2`.
    Independent,
    /// Shared noise, but `x_{t+1} = abar_{t+1} x_t + sbar_{t+1} e`. Debug only:
    /// its marginal differs from the forward process.
    Literal,
}

impl FromStr for PairMode {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "shared" => Ok(Self::Shared),
            "independent" => Ok(Self::Independent),
            "literal" => Ok(Self::Literal),
            o => Err(format!("unknown pair mode `{o}`")),
        }
    }
}

/// Which quantity the EBM loss averages.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EbmLossScale {
    /// The energy `f = f_hat / s_t^2`.
    #[default]
    Energy,
    /// The raw network output `f_hat`.
    Raw,
}

impl FromStr for EbmLossScale {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "energy" => Ok(Self::Energy),
            "raw" => Ok(Self::Raw),
            o => Err(format!("unknown loss scale `{o}`")),
        }
    }
}

/// Everything a training run depends on. Mirrors the flat `key = value` file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub num_levels: usize,
    pub steps: usize,
    pub step_constant: f64,
    pub lambda_max: f64,
    pub lambda_min: f64,
    pub sigma_tilde: SigmaTildeRule,
    pub lr_ebm: f64,
    pub lr_init: f64,
    pub warmup_iters: u64,
    pub init_head_start: u64,
    pub batch_size: usize,
    pub total_iters: u64,
    pub ema_decay: f64,
    pub p_uncond: f64,
    pub pair_mode: PairMode,
    pub per_element_levels: bool,
    pub init_target: InitTarget,
    pub ebm_loss_scale: EbmLossScale,
    /// Global-norm gradient clip; 0 disables.
    pub grad_clip: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub weight_decay: f64,
    pub hidden: Vec<usize>,
    pub time_embed_dim: usize,
    pub class_embed_dim: usize,
    pub activation: Activation,
    pub num_classes: usize,
    pub dataset: ToyKind,
    pub data_dim: usize,
    pub data_size: usize,
    pub data_extent: f64,
    /// CSV training data; overrides `dataset` when set.
    pub data_path: Option<String>,
    pub divergence_bound: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            num_levels: 6,
            steps: 15,
            step_constant: 0.054,
            lambda_max: 9.8,
            lambda_min: -5.1,
            sigma_tilde: SigmaTildeRule::NextStep,
            lr_ebm: 1e-4,
            lr_init: 1e-5,
            warmup_iters: 10_000,
            init_head_start: 500,
            batch_size: 256,
            total_iters: 20_000,
            ema_decay: 0.9999,
            p_uncond: 0.1,
            pair_mode: PairMode::Shared,
            per_element_levels: false,
            init_target: InitTarget::Direct,
            ebm_loss_scale: EbmLossScale::Energy,
            grad_clip: 0.0,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            weight_decay: 0.0,
            hidden: vec![128, 128, 128],
            time_embed_dim: 32,
            class_embed_dim: 16,
            activation: Activation::Swish,
            num_classes: 0,
            dataset: ToyKind::Checkerboard,
            data_dim: 2,
            data_size: 100_000,
            data_extent: 1.0,
            data_path: None,
            divergence_bound: 1e3,
            seed: 0,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: Display,
{
    value.parse().map_err(|e: T::Err| ConfigError::InvalidValue {
        key: key.into(),
        value: value.into(),
        reason: e.to_string(),
    })
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(ConfigError::InvalidValue {
            key: key.into(),
            value: value.into(),
            reason: "expected true or false".into(),
        }),
    }
}

/// Config keys in file order.
pub const KEYS: &[&str] = &[
    "T",
    "K",
    "step_constant",
    "lambda_max",
    "lambda_min",
    "sigma_tilde",
    "lr_ebm",
    "lr_init",
    "warmup_iters",
    "init_head_start",
    "batch_size",
    "total_iters",
    "ema_decay",
    "p_uncond",
    "variance_reduction",
    "pair_mode",
    "per_element_levels",
    "init_target",
    "ebm_loss_scale",
    "grad_clip",
    "adam_beta1",
    "adam_beta2",
    "adam_eps",
    "weight_decay",
    "hidden",
    "time_embed_dim",
    "class_embed_dim",
    "activation",
    "num_classes",
    "dataset",
    "data_dim",
    "data_size",
    "data_extent",
    "data_path",
    "divergence_bound",
    "seed",
];

impl TrainConfig {
    /// Sets one key from its text form.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "T" => self.num_levels = parse(key, v)?,
            "K" => self.steps = parse(key, v)?,
            "step_constant" => self.step_constant = parse(key, v)?,
            "lambda_max" => self.lambda_max = parse(key, v)?,
            "lambda_min" => self.lambda_min = parse(key, v)?,
            "sigma_tilde" => self.sigma_tilde = parse(key, v)?,
            "lr_ebm" => self.lr_ebm = parse(key, v)?,
            "lr_init" => self.lr_init = parse(key, v)?,
            "warmup_iters" => self.warmup_iters = parse(key, v)?,
            "init_head_start" => self.init_head_start = parse(key, v)?,
            "batch_size" => self.batch_size = parse(key, v)?,
            "total_iters" => self.total_iters = parse(key, v)?,
            "ema_decay" => self.ema_decay = parse(key, v)?,
            "p_uncond" => self.p_uncond = parse(key, v)?,
            "variance_reduction" => {
                self.pair_mode = if parse_bool(key, v)? {
                    PairMode::Shared
                } else {
                    PairMode::Independent
                }
            }
            "pair_mode" => self.pair_mode = parse(key, v)?,
            "per_element_levels" => self.per_element_levels = parse_bool(key, v)?,
            "init_target" => self.init_target = parse(key, v)?,
            "ebm_loss_scale" => self.ebm_loss_scale = parse(key, v)?,
            "grad_clip" => self.grad_clip = parse(key, v)?,
            "adam_beta1" => self.adam_beta1 = parse(key, v)?,
            "adam_beta2" => self.adam_beta2 = parse(key, v)?,
            "adam_eps" => self.adam_eps = parse(key, v)?,
            "weight_decay" => self.weight_decay = parse(key, v)?,
            "hidden" => {
                self.hidden = v
                    .split(',')
                    .filter(|s| !s.trim().is_empty())
                    .map(|s| parse(key, s.trim()))
                    .collect::<Result<_>>()?
            }
            "time_embed_dim" => self.time_embed_dim = parse(key, v)?,
            "class_embed_dim" => self.class_embed_dim = parse(key, v)?,
            "activation" => self.activation = parse(key, v)?,
            "num_classes" => self.num_classes = parse(key, v)?,
            "dataset" => self.dataset = parse(key, v)?,
            "data_dim" => self.data_dim = parse(key, v)?,
            "data_size" => self.data_size = parse(key, v)?,
            "data_extent" => self.data_extent = parse(key, v)?,
            "data_path" => self.data_path = (!v.is_empty()).then(|| v.to_string()),
            "divergence_bound" => self.divergence_bound = parse(key, v)?,
            "seed" => self.seed = parse(key, v)?,
            other => return Err(ConfigError::UnknownKey(other.to_string())),
        }
        Ok(())
    }

    /// Text form of one key, as accepted by [`TrainConfig::set`].
    pub fn get(&self, key: &str) -> Option<String> {
        let join = |v: &[usize]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",");
        let enum_name = |v: serde_json::Value| v.as_str().unwrap_or_default().to_string();
        Some(match key {
            "T" => self.num_levels.to_string(),
            "K" => self.steps.to_string(),
            "step_constant" => self.step_constant.to_string(),
            "lambda_max" => self.lambda_max.to_string(),
            "lambda_min" => self.lambda_min.to_string(),
            "sigma_tilde" => enum_name(serde_json::to_value(self.sigma_tilde).ok()?),
            "lr_ebm" => self.lr_ebm.to_string(),
            "lr_init" => self.lr_init.to_string(),
            "warmup_iters" => self.warmup_iters.to_string(),
            "init_head_start" => self.init_head_start.to_string(),
            "batch_size" => self.batch_size.to_string(),
            "total_iters" => self.total_iters.to_string(),
            "ema_decay" => self.ema_decay.to_string(),
            "p_uncond" => self.p_uncond.to_string(),
            "variance_reduction" => (self.pair_mode != PairMode::Independent).to_string(),
            "pair_mode" => enum_name(serde_json::to_value(self.pair_mode).ok()?),
            "per_element_levels" => self.per_element_levels.to_string(),
            "init_target" => enum_name(serde_json::to_value(self.init_target).ok()?),
            "ebm_loss_scale" => enum_name(serde_json::to_value(self.ebm_loss_scale).ok()?),
            "grad_clip" => self.grad_clip.to_string(),
            "adam_beta1" => self.adam_beta1.to_string(),
            "adam_beta2" => self.adam_beta2.to_string(),
            "adam_eps" => self.adam_eps.to_string(),
            "weight_decay" => self.weight_decay.to_string(),
            "hidden" => join(&self.hidden),
            "time_embed_dim" => self.time_embed_dim.to_string(),
            "class_embed_dim" => self.class_embed_dim.to_string(),
            "activation" => enum_name(serde_json::to_value(self.activation).ok()?),
            "num_classes" => self.num_classes.to_string(),
            "dataset" => self.dataset.name().to_string(),
            "data_dim" => self.data_dim.to_string(),
            "data_size" => self.data_size.to_string(),
            "data_extent" => self.data_extent.to_string(),
            "data_path" => self.data_path.clone().unwrap_or_default(),
            "divergence_bound" => self.divergence_bound.to_string(),
            "seed" => self.seed.to_string(),
            _ => return None,
        })
    }

    /// Parses a `key = value` document on top of the defaults. `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| ConfigError::Syntax {
                line: i + 1,
                text: raw.to_string(),
            })?;
            self.set(k.trim(), v)?;
        }
        self.validate()
    }

    /// Every key, one per line, in a form [`TrainConfig::parse`] reads back.
    pub fn to_text(&self) -> String {
        KEYS.iter()
            .filter(|k| **k != "variance_reduction")
            .map(|k| format!("{k} = {}\n", self.get(k).expect("known key")))
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(ConfigError::Inconsistent(msg));
        if self.num_levels < 2 {
            return bad(format!("T must be at least 2, got {}", self.num_levels));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if !(self.lr_ebm >= 0.0 && self.lr_init >= 0.0) {
            return bad("learning rates must be non-negative".into());
        }
        if !(0.0..=1.0).contains(&self.p_uncond) {
            return bad(format!("p_uncond must lie in [0, 1], got {}", self.p_uncond));
        }
        if !(0.0..1.0).contains(&self.ema_decay) {
            return bad(format!("ema_decay must lie in [0, 1), got {}", self.ema_decay));
        }
        if self.data_dim == 0 {
            return bad("data_dim must be positive".into());
        }
        if self.data_path.is_none() && self.data_size < self.batch_size {
            return bad(format!(
                "data_size {} is smaller than batch_size {}",
                self.data_size, self.batch_size
            ));
        }
        if !(self.divergence_bound > 0.0) {
            return bad("divergence_bound must be positive".into());
        }
        if !(self.grad_clip >= 0.0) {
            return bad("grad_clip must be non-negative".into());
        }
        Ok(())
    }

    pub fn schedule_config(&self) -> ScheduleConfig {
        ScheduleConfig {
            num_levels: self.num_levels,
            lambda_max: self.lambda_max,
            lambda_min: self.lambda_min,
            step_constant: self.step_constant,
            sigma_tilde: self.sigma_tilde,
        }
    }

    pub fn adam_config(&self) -> AdamConfig {
        AdamConfig {
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            eps: self.adam_eps,
            weight_decay: self.weight_decay,
        }
    }

    pub fn energy_spec(&self, dim: usize) -> MlpSpec {
        MlpSpec {
            input_dim: dim,
            output_dim: 1,
            hidden: self.hidden.clone(),
            time_embed_dim: self.time_embed_dim,
            num_classes: self.num_classes,
            class_embed_dim: self.class_embed_dim,
            activation: self.activation,
        }
    }

    pub fn init_spec(&self, dim: usize) -> MlpSpec {
        MlpSpec {
            output_dim: dim,
            ..self.energy_spec(dim)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip() {
        let mut c = TrainConfig::default();
        c.set("hidden", "64, 32").unwrap();
        c.set("variance_reduction", "false").unwrap();
        c.set("data_path", "a.csv").unwrap();
        c.set("init_target", "noise").unwrap();
        let back = TrainConfig::parse(&c.to_text()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.hidden, vec![64, 32]);
        assert_eq!(back.pair_mode, PairMode::Independent);
    }

    #[test]
    fn rejects_unknown_and_malformed() {
        assert_eq!(
            TrainConfig::parse("bogus = 1").unwrap_err(),
            ConfigError::UnknownKey("bogus".into())
        );
        assert!(matches!(TrainConfig::parse("T 5"), Err(ConfigError::Syntax { line: 1, .. })));
        assert!(matches!(
            TrainConfig::parse("lr_ebm = fast"),
            Err(ConfigError::InvalidValue { .. })
        ));
        assert!(matches!(TrainConfig::parse("p_uncond = 2"), Err(ConfigError::Inconsistent(_))));
        let c = TrainConfig::parse("# toy\nT = 5 # levels\n\nK=3").unwrap();
        assert_eq!((c.num_levels, c.steps), (5, 3));
    }
}
