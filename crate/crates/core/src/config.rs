//! TOML configuration files whose keys mirror the command-line flag names.
//!
//! ```toml
//! beta = 0.3
//! schedule = "exponential"
//! power = 2
//! no-inter = true
//! ```
//!
//! Unknown keys are rejected. Keys that are absent fall back to defaults.

use std::path::Path;

use thiserror::Error;
use toml::{Table, Value};

use crate::diagnostics::Selector;
use crate::error::Error;
use crate::grpo::{ClipConfig, LossAgg};
use crate::model::{Schedule, ShapingConfig, Span, StdMode};
use crate::synth::{Algo, SynthConfig};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("unknown config key `{0}`")]
    UnknownKey(String),

    #[error("config key `{key}`: expected {expected}")]
    Type { key: String, expected: &'static str },

    #[error("config parse error: {0}")]
    Syntax(String),

    #[error(transparent)]
    Range(#[from] Error),

    #[error("cannot read config: {0}")]
    Io(#[from] std::io::Error),
}

/// Every setting that can come from a flag or a config file. `None` means
/// "not specified here".
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub beta: Option<f64>,
    pub gamma: Option<f64>,
    pub kappa: Option<f64>,
    pub schedule: Option<String>,
    pub power: Option<f64>,
    pub span: Option<String>,
    pub epsilon: Option<f64>,
    pub eps_low: Option<f64>,
    pub eps_high: Option<f64>,
    pub std_mode: Option<String>,
    pub loss_agg: Option<String>,
    pub no_intra: Option<bool>,
    pub no_inter: Option<bool>,
    pub split_point: Option<f64>,
    pub selector: Option<String>,
    pub seed: Option<u64>,
    pub groups: Option<usize>,
    pub steps: Option<usize>,
    pub seeds: Option<usize>,
    pub algo: Option<String>,
    pub dim: Option<usize>,
    pub vocab: Option<usize>,
    pub seq_len: Option<usize>,
    pub group_size: Option<usize>,
    pub groups_per_batch: Option<usize>,
    pub image_tokens: Option<usize>,
    pub evidence_gain: Option<f64>,
    pub rho_decay: Option<f64>,
    pub flat_focus: Option<bool>,
    pub lr: Option<f64>,
    pub updates_per_batch: Option<usize>,
}

pub const DEFAULT_SPLIT_POINT: f64 = 0.5;
pub const DEFAULT_POWER: f64 = 1.0;

fn float(key: &str, v: &Value) -> Result<f64, ConfigError> {
    match v {
        Value::Float(f) => Ok(*f),
        Value::Integer(i) => Ok(*i as f64),
        _ => Err(ConfigError::Type {
            key: key.into(),
            expected: "a number",
        }),
    }
}

fn uint(key: &str, v: &Value) -> Result<u64, ConfigError> {
    match v {
        Value::Integer(i) if *i >= 0 => Ok(*i as u64),
        _ => Err(ConfigError::Type {
            key: key.into(),
            expected: "a non-negative integer",
        }),
    }
}

fn string(key: &str, v: &Value) -> Result<String, ConfigError> {
    match v {
        Value::String(s) => Ok(s.clone()),
        _ => Err(ConfigError::Type {
            key: key.into(),
            expected: "a string",
        }),
    }
}

fn boolean(key: &str, v: &Value) -> Result<bool, ConfigError> {
    match v {
        Value::Boolean(b) => Ok(*b),
        _ => Err(ConfigError::Type {
            key: key.into(),
            expected: "a boolean",
        }),
    }
}

impl Overrides {
    pub fn from_toml_str(text: &str) -> Result<Self, ConfigError> {
        let table: Table = text
            .parse()
            .map_err(|e: toml::de::Error| ConfigError::Syntax(e.to_string()))?;
        let mut o = Overrides::default();
        for (key, v) in &table {
            let k = key.as_str();
            match k {
                "beta" => o.beta = Some(float(k, v)?),
                "gamma" => o.gamma = Some(float(k, v)?),
                "kappa" => o.kappa = Some(float(k, v)?),
                "schedule" => o.schedule = Some(string(k, v)?),
                "power" => o.power = Some(float(k, v)?),
                "span" => o.span = Some(string(k, v)?),
                "epsilon" => o.epsilon = Some(float(k, v)?),
                "eps-low" => o.eps_low = Some(float(k, v)?),
                "eps-high" => o.eps_high = Some(float(k, v)?),
                "std-mode" => o.std_mode = Some(string(k, v)?),
                "loss-agg" => o.loss_agg = Some(string(k, v)?),
                "no-intra" => o.no_intra = Some(boolean(k, v)?),
                "no-inter" => o.no_inter = Some(boolean(k, v)?),
                "split-point" => o.split_point = Some(float(k, v)?),
                "selector" => o.selector = Some(string(k, v)?),
                "seed" => o.seed = Some(uint(k, v)?),
                "groups" => o.groups = Some(uint(k, v)? as usize),
                "steps" => o.steps = Some(uint(k, v)? as usize),
                "seeds" => o.seeds = Some(uint(k, v)? as usize),
                "algo" => o.algo = Some(string(k, v)?),
                "dim" => o.dim = Some(uint(k, v)? as usize),
                "vocab" => o.vocab = Some(uint(k, v)? as usize),
                "seq-len" => o.seq_len = Some(uint(k, v)? as usize),
                "group-size" => o.group_size = Some(uint(k, v)? as usize),
                "groups-per-batch" => o.groups_per_batch = Some(uint(k, v)? as usize),
                "image-tokens" => o.image_tokens = Some(uint(k, v)? as usize),
                "evidence-gain" => o.evidence_gain = Some(float(k, v)?),
                "rho-decay" => o.rho_decay = Some(float(k, v)?),
                "flat-focus" => o.flat_focus = Some(boolean(k, v)?),
                "lr" => o.lr = Some(float(k, v)?),
                "updates-per-batch" => o.updates_per_batch = Some(uint(k, v)? as usize),
                other => return Err(ConfigError::UnknownKey(other.to_string())),
            }
        }
        Ok(o)
    }

    /// Fills every unset field of `self` from `lower`.
    pub fn or(self, lower: Overrides) -> Overrides {
        macro_rules! pick {
            ($($f:ident),* $(,)?) => {
                Overrides { $($f: self.$f.or(lower.$f)),* }
            };
        }
        pick!(
            beta,
            gamma,
            kappa,
            schedule,
            power,
            span,
            epsilon,
            eps_low,
            eps_high,
            std_mode,
            loss_agg,
            no_intra,
            no_inter,
            split_point,
            selector,
            seed,
            groups,
            steps,
            seeds,
            algo,
            dim,
            vocab,
            seq_len,
            group_size,
            groups_per_batch,
            image_tokens,
            evidence_gain,
            rho_decay,
            flat_focus,
            lr,
            updates_per_batch,
        )
    }

    pub fn shaping(&self) -> Result<ShapingConfig, Error> {
        let d = ShapingConfig::default();
        let power = self.power.unwrap_or(DEFAULT_POWER);
        let schedule = match &self.schedule {
            Some(name) => Schedule::parse(name, power)?,
            None => d.schedule,
        };
        let cfg = ShapingConfig {
            beta: self.beta.unwrap_or(d.beta),
            gamma: self.gamma.unwrap_or(d.gamma),
            kappa: self.kappa.unwrap_or(d.kappa),
            schedule,
            span: self
                .span
                .as_deref()
                .map(str::parse::<Span>)
                .transpose()?
                .unwrap_or(d.span),
            epsilon_smooth: self.epsilon.unwrap_or(d.epsilon_smooth),
            clip_low: self.eps_low.unwrap_or(d.clip_low),
            clip_high: self.eps_high.unwrap_or(d.clip_high),
            std_mode: self
                .std_mode
                .as_deref()
                .map(str::parse::<StdMode>)
                .transpose()?
                .unwrap_or(d.std_mode),
            enable_intra: !self.no_intra.unwrap_or(false),
            enable_inter: !self.no_inter.unwrap_or(false),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn clip(&self) -> Result<ClipConfig, Error> {
        let s = self.shaping()?;
        Ok(ClipConfig {
            clip_low: s.clip_low,
            clip_high: s.clip_high,
            loss_agg: self.loss_agg()?,
        })
    }

    pub fn loss_agg(&self) -> Result<LossAgg, Error> {
        Ok(self
            .loss_agg
            .as_deref()
            .map(str::parse::<LossAgg>)
            .transpose()?
            .unwrap_or_default())
    }

    pub fn synth(&self) -> Result<SynthConfig, Error> {
        let d = SynthConfig::default();
        let cfg = SynthConfig {
            seed: self.seed.unwrap_or(d.seed),
            dim: self.dim.unwrap_or(d.dim),
            vocab: self.vocab.unwrap_or(d.vocab),
            seq_len: self.seq_len.unwrap_or(d.seq_len),
            group_size: self.group_size.unwrap_or(d.group_size),
            groups_per_batch: self.groups_per_batch.unwrap_or(d.groups_per_batch),
            image_tokens: self.image_tokens.unwrap_or(d.image_tokens),
            evidence_gain: self.evidence_gain.unwrap_or(d.evidence_gain),
            rho_decay: self.rho_decay.unwrap_or(d.rho_decay),
            flat_focus: self.flat_focus.unwrap_or(d.flat_focus),
            learning_rate: self.lr.unwrap_or(d.learning_rate),
            updates_per_batch: self.updates_per_batch.unwrap_or(d.updates_per_batch),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn algo(&self) -> Result<Algo, Error> {
        Ok(self
            .algo
            .as_deref()
            .map(str::parse::<Algo>)
            .transpose()?
            .unwrap_or_default())
    }

    pub fn selector(&self) -> Result<Selector, Error> {
        Ok(self
            .selector
            .as_deref()
            .map(str::parse::<Selector>)
            .transpose()?
            .unwrap_or_default())
    }

    pub fn split_point(&self) -> Result<f64, Error> {
        let p = self.split_point.unwrap_or(DEFAULT_SPLIT_POINT);
        if p > 0.0 && p < 1.0 {
            Ok(p)
        } else {
            Err(Error::InvalidConfig {
                key: "split-point".into(),
                reason: format!("must lie in (0, 1), got {p}"),
            })
        }
    }
}

/// Reads a config file and checks that every value is in range.
pub fn read_config(path: impl AsRef<Path>) -> Result<Overrides, ConfigError> {
    let text = std::fs::read_to_string(path)?;
    let o = Overrides::from_toml_str(&text)?;
    o.shaping()?;
    o.synth()?;
    o.loss_agg()?;
    o.algo()?;
    o.selector()?;
    o.split_point()?;
    Ok(o)
}
