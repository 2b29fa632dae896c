//! Experiment configuration: flat `section.key = value` text.
//!
//! Blank lines and `#` comments are ignored. Every key is checked against
//! a fixed table when set, so a typo fails before any compute. Unset keys
//! fall back to their defaults when a concrete config is built.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::data::Format;
use crate::error::{Error, Result};
use crate::linear::{EaseConfig, IalsConfig, IalsObjective};
use crate::losses::{LossFamily, LossSpec};
use crate::model::{InitScheme, ScoreMode};
use crate::sampling::{NegativeMode, SamplerConfig, TauPolicy};
use crate::trainer::TrainConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Kind {
    Int,
    Real,
    Bool,
    Text,
    Family,
    ScoreMode,
    NegMode,
    TauMode,
    Init,
    Format,
}

/// (key, kind, default, description)
const KEYS: &[(&str, Kind, &str, &str)] = &[
    ("seed", Kind::Int, "0", "top-level seed for every random stream"),
    ("data.train", Kind::Text, "", "training interactions"),
    ("data.test", Kind::Text, "", "test interactions"),
    ("data.valid", Kind::Text, "", "validation interactions; carved from train when unset"),
    ("data.format", Kind::Format, "pairs", "adjacency | pairs"),
    ("data.valid_fraction", Kind::Real, "0.1", "per-user share of train held out for validation"),
    ("output.dir", Kind::Text, "out", "directory for checkpoints and reports"),
    ("train.batch_size", Kind::Int, "512", "positives per batch"),
    ("train.lr", Kind::Real, "1e-4", "initial Adam learning rate"),
    ("train.lr_floor", Kind::Real, "1e-6", "stop once lr falls below this"),
    ("train.lr_decay", Kind::Real, "0.5", "lr factor on a plateau"),
    ("train.plateau_patience", Kind::Int, "5", "evaluations without gain before decay"),
    ("train.l2_reg", Kind::Real, "1e-8", "L2 weight on the embeddings"),
    ("train.max_epochs", Kind::Int, "500", "epoch cap"),
    ("train.d", Kind::Int, "64", "embedding dimension"),
    ("train.init", Kind::Init, "normal", "normal | xavier"),
    ("train.init_sigma", Kind::Real, "0.1", "std of the normal init"),
    ("train.eval_every", Kind::Int, "5", "epochs between validation runs"),
    ("train.eval_k", Kind::Int, "20", "K of the validation recall"),
    ("train.freeze_extra_positives", Kind::Bool, "false", "no gradient through extra positives"),
    ("loss.family", Kind::Family, "bpr", "loss family"),
    ("loss.temperature", Kind::Real, "", "t"),
    ("loss.neg_weight", Kind::Real, "", "lambda"),
    ("loss.margin", Kind::Real, "", "epsilon (CCL)"),
    ("loss.ccl_weight", Kind::Real, "", "w (biased MSE / CCL)"),
    ("loss.score_mode", Kind::ScoreMode, "", "dot | cosine; family default when unset"),
    ("loss.clamp_bracket", Kind::Bool, "true", "clamp the debiased pointwise bracket at 0"),
    ("loss.mean_difference", Kind::Bool, "false", "bpr on the mean score difference"),
    ("sampler.negative_mode", Kind::NegMode, "uniform-all", "uniform-all | uniform-unobserved | popularity"),
    ("sampler.n_negatives", Kind::Int, "800", "N"),
    ("sampler.m_extra_positives", Kind::Int, "0", "M"),
    ("sampler.shared_pool", Kind::Bool, "false", "one negative pool per batch"),
    ("tau.mode", Kind::TauMode, "proportional", "proportional | topk"),
    ("tau.alpha", Kind::Real, "0", "tau+ = (1+alpha)|I_u+|/|I|"),
    ("tau.k", Kind::Int, "0", "tau+ = (|I_u+|+k)/|I|"),
    ("ials.d", Kind::Int, "64", "factor dimension"),
    ("ials.alpha0", Kind::Real, "0.1", "unobserved weight"),
    ("ials.lambda", Kind::Real, "1e-3", "global regularization"),
    ("ials.nu", Kind::Real, "1", "frequency exponent of the regularization"),
    ("ials.c", Kind::Real, "1.5", "debias weight c (debiased objective)"),
    ("ials.iters", Kind::Int, "10", "sweeps"),
    ("ials.init_sigma", Kind::Real, "0.1", "std of the initial factors"),
    ("ease.lambda", Kind::Real, "500", "ridge weight"),
    ("ease.alpha", Kind::Real, "0.1", "debias strength (debiased EASE)"),
];

fn lookup(key: &str) -> Option<&'static (&'static str, Kind, &'static str, &'static str)> {
    KEYS.iter().find(|k| k.0 == key)
}

fn check_value(key: &str, kind: Kind, value: &str) -> Result<()> {
    let bad = |what: &str| Err(Error::Config(format!("`{key}`: `{value}` is not {what}")));
    let ok = match kind {
        Kind::Int => value.parse::<u64>().is_ok(),
        Kind::Real => value.parse::<f64>().map(f64::is_finite).unwrap_or(false),
        Kind::Bool => matches!(value, "true" | "false"),
        Kind::Text => !value.is_empty(),
        Kind::Family => return LossFamily::from_str(value).map(|_| ()),
        Kind::ScoreMode => return ScoreMode::from_str(value).map(|_| ()),
        Kind::NegMode => return NegativeMode::from_str(value).map(|_| ()),
        Kind::Format => return Format::from_str(value).map(|_| ()),
        Kind::TauMode => matches!(value, "proportional" | "topk"),
        Kind::Init => matches!(value, "normal" | "xavier"),
    };
    if ok {
        Ok(())
    } else {
        bad(match kind {
            Kind::Int => "a non-negative integer",
            Kind::Real => "a finite number",
            Kind::Bool => "true or false",
            Kind::TauMode => "proportional or topk",
            Kind::Init => "normal or xavier",
            _ => "a non-empty value",
        })
    }
}

/// Explicitly set keys; see the key table for defaults.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ExperimentConfig {
    values: BTreeMap<String, String>,
}

impl ExperimentConfig {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn parse(text: &str, source: &str) -> Result<Self> {
        let mut cfg = Self::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
                path: source.to_string(),
                line: idx + 1,
                msg: "expected `key = value`".into(),
            })?;
            cfg.set(k.trim(), v.trim()).map_err(|e| Error::Parse {
                path: source.to_string(),
                line: idx + 1,
                msg: e.to_string(),
            })?;
        }
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, &path.display().to_string())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let (_, kind, _, _) =
            lookup(key).ok_or_else(|| Error::Config(format!("unknown config key `{key}`")))?;
        check_value(key, *kind, value)?;
        self.values.insert(key.to_string(), value.to_string());
        Ok(())
    }

    /// Applies a `key=value` override.
    pub fn set_pair(&mut self, pair: &str) -> Result<()> {
        let (k, v) = pair
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override `{pair}` is not key=value")))?;
        self.set(k.trim(), v.trim())
    }

    pub fn is_known_key(key: &str) -> bool {
        lookup(key).is_some()
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(String::as_str)
    }

    /// Explicit value or default; `None` for unset keys without a default.
    pub fn resolved(&self, key: &str) -> Option<&str> {
        self.get(key)
            .or_else(|| lookup(key).map(|k| k.2).filter(|d| !d.is_empty()))
    }

    /// Explicitly set keys, one per line, in key order.
    pub fn emit(&self) -> String {
        let mut s = String::new();
        for (k, v) in &self.values {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }

    /// Every key with a value, defaults included.
    pub fn emit_resolved(&self) -> String {
        let mut s = String::new();
        for (k, ..) in KEYS {
            if let Some(v) = self.resolved(k) {
                let _ = writeln!(s, "{k} = {v}");
            }
        }
        s
    }

    /// Key table as help text.
    pub fn describe_keys() -> String {
        let mut s = String::new();
        for (k, _, d, help) in KEYS {
            let d = if d.is_empty() { "-" } else { d };
            let _ = writeln!(s, "{k:<32} {d:<14} {help}");
        }
        s
    }

    fn parsed<T: FromStr>(&self, key: &str) -> Option<T> {
        self.resolved(key).and_then(|v| v.parse().ok())
    }

    fn req<T: FromStr>(&self, key: &str) -> T {
        self.parsed(key)
            .unwrap_or_else(|| panic!("key `{key}` has a checked default"))
    }

    pub fn seed(&self) -> u64 {
        self.req("seed")
    }

    pub fn path(&self, key: &str) -> Option<PathBuf> {
        self.resolved(key).map(PathBuf::from)
    }

    pub fn format(&self) -> Format {
        self.req("data.format")
    }

    pub fn valid_fraction(&self) -> f64 {
        self.req("data.valid_fraction")
    }

    pub fn loss_spec(&self) -> Result<LossSpec<f64>> {
        let family: LossFamily = self.req("loss.family");
        let mut s = LossSpec::new(family);
        s.temperature = self.parsed("loss.temperature");
        s.neg_weight = self.parsed("loss.neg_weight");
        s.margin = self.parsed("loss.margin");
        s.ccl_weight = self.parsed("loss.ccl_weight");
        if let Some(m) = self.parsed("loss.score_mode") {
            s.score_mode = m;
        }
        s.clamp_bracket = self.req("loss.clamp_bracket");
        s.mean_difference = self.req("loss.mean_difference");
        s.validate()?;
        Ok(s)
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        let seed = self.seed();
        let init = match self.resolved("train.init") {
            Some("xavier") => InitScheme::Xavier,
            _ => InitScheme::Normal {
                sigma: self.req("train.init_sigma"),
            },
        };
        let tau = match self.resolved("tau.mode") {
            Some("topk") => TauPolicy::TopK { k: self.req("tau.k") },
            _ => TauPolicy::Proportional {
                alpha: self.req("tau.alpha"),
            },
        };
        let cfg = TrainConfig {
            batch_size: self.req("train.batch_size"),
            lr: self.req("train.lr"),
            lr_floor: self.req("train.lr_floor"),
            lr_decay: self.req("train.lr_decay"),
            plateau_patience: self.req("train.plateau_patience"),
            l2_reg: self.req("train.l2_reg"),
            max_epochs: self.req("train.max_epochs"),
            d: self.req("train.d"),
            init,
            sampler: SamplerConfig {
                negative_mode: self.req("sampler.negative_mode"),
                n_negatives: self.req("sampler.n_negatives"),
                m_extra_positives: self.req("sampler.m_extra_positives"),
                shared_pool: self.req("sampler.shared_pool"),
                seed,
            },
            tau,
            loss: self.loss_spec()?,
            eval_every: self.req("train.eval_every"),
            eval_k: self.req("train.eval_k"),
            freeze_extra_positives: self.req("train.freeze_extra_positives"),
            seed,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn ials_config(&self, debiased: bool) -> Result<IalsConfig> {
        let cfg = IalsConfig {
            d: self.req("ials.d"),
            alpha0: self.req("ials.alpha0"),
            lambda: self.req("ials.lambda"),
            nu: self.req("ials.nu"),
            objective: if debiased {
                IalsObjective::Debiased {
                    c: self.req("ials.c"),
                }
            } else {
                IalsObjective::Original
            },
            iters: self.req("ials.iters"),
            init_sigma: self.req("ials.init_sigma"),
            seed: self.seed(),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn ease_config(&self, debiased: bool) -> Result<EaseConfig> {
        let lambda = self.req("ease.lambda");
        let cfg = if debiased {
            EaseConfig::debiased(lambda, self.req("ease.alpha"))
        } else {
            EaseConfig::original(lambda)
        };
        cfg.validate()?;
        Ok(cfg)
    }
}
