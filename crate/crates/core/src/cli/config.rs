//! Flat `key = value` run configuration.
//!
//! Resolution order is mode defaults, then config file entries, then flag
//! entries; later assignments win. [`RunConfig::snapshot`] writes every
//! resolved key back in the same format so a run can be replayed from its
//! snapshot alone.

use std::fmt::Write as _;
use std::str::FromStr;

use crate::constraint::{ConstraintMode, HeadKind, NeighborCount};
use crate::data::AugmentSpec;
use crate::trainer::TrainConfig;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ConfigError {
    #[error("line {line}: expected `key = value`, got {text:?}")]
    Syntax { line: usize, text: String },
    #[error("unknown config key `{0}`")]
    UnknownKey(String),
    #[error("key `{key}`: cannot parse {value:?}")]
    BadValue { key: String, value: String },
    #[error("key `{key}` does not apply to mode {mode}")]
    NotApplicable { key: String, mode: String },
    #[error("unknown mode {0:?}")]
    UnknownMode(String),
}

/// What a run trains.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Method {
    /// Constrained mean shift in one of its modes (`ConstraintMode::None` is
    /// the plain mean-shift baseline).
    Cmsf(ConstraintMode),
    /// Mean shift with `k = 1` and the target included: `S = {u}`.
    Byol,
    /// Supervised cross-entropy on the same trunk.
    Xent,
}

impl Method {
    pub fn parse(name: &str) -> Result<Self, ConfigError> {
        Ok(match name {
            "msf" | "none" => Method::Cmsf(ConstraintMode::None),
            "self" => Method::Cmsf(ConstraintMode::SelfAug { k_prime: 5 }),
            "sup" => Method::Cmsf(ConstraintMode::Supervised),
            "semi" => Method::Cmsf(ConstraintMode::SemiSupervised { threshold: 0.85 }),
            "semi-basic" => Method::Cmsf(ConstraintMode::SemiBasic),
            "cross" => Method::Cmsf(ConstraintMode::Cross { k_prime: 5 }),
            "byol" => Method::Byol,
            "xent" => Method::Xent,
            other => return Err(ConfigError::UnknownMode(other.to_string())),
        })
    }

    pub fn name(&self) -> &'static str {
        match self {
            Method::Cmsf(ConstraintMode::None) => "msf",
            Method::Cmsf(m) => m.name(),
            Method::Byol => "byol",
            Method::Xent => "xent",
        }
    }

    fn constraint_mode(&self) -> ConstraintMode {
        match self {
            Method::Cmsf(m) => *m,
            Method::Byol | Method::Xent => ConstraintMode::None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenSpec {
    pub classes: usize,
    pub per_class: usize,
    pub dim: usize,
    pub sep: f64,
}

impl Default for GenSpec {
    fn default() -> Self {
        Self { classes: 10, per_class: 500, dim: 32, sep: 3.0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub method: Method,
    pub train: TrainConfig,
    /// Dataset file (`.csv` or binary); empty means generate from `gen`.
    pub data: String,
    pub gen: GenSpec,
    pub test_fraction: f64,
    /// Fraction of training samples that keep their label.
    pub label_fraction: f64,
    pub label_noise: f64,
    /// Evaluate every this many epochs; 0 evaluates only at the end.
    pub eval_every: usize,
    /// Checkpoint every this many epochs; the final checkpoint is always kept.
    pub checkpoint_every: usize,
    pub linear_probe: bool,
    pub out: String,
}

impl RunConfig {
    pub fn defaults(method: Method) -> Self {
        let mut train = TrainConfig::for_mode(method.constraint_mode());
        if method == Method::Byol {
            train.constraint.k = NeighborCount::Top(1);
            train.constraint.include_target = true;
        }
        Self {
            method,
            train,
            data: String::new(),
            gen: GenSpec::default(),
            test_fraction: 0.2,
            label_fraction: 1.0,
            label_noise: 0.0,
            eval_every: 0,
            checkpoint_every: 0,
            linear_probe: false,
            out: "run".into(),
        }
    }

    /// Applies `entries` in order on top of the defaults of the last `mode`
    /// entry (`self` when none is given).
    pub fn resolve(entries: &[(String, String)]) -> Result<Self, ConfigError> {
        let mode = entries.iter().rev().find(|(k, _)| k == "mode").map_or("self", |(_, v)| v.as_str());
        let mut cfg = Self::defaults(Method::parse(mode)?);
        for (k, v) in entries {
            if k != "mode" {
                cfg.set(k, v)?;
            }
        }
        Ok(cfg)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        let bad = || ConfigError::BadValue { key: key.to_string(), value: value.to_string() };
        let na = || ConfigError::NotApplicable { key: key.to_string(), mode: self.method.name().to_string() };
        let t = &mut self.train;
        match key {
            "seed" => t.seed = num(key, value)?,
            "data" => self.data = value.to_string(),
            "gen_classes" => self.gen.classes = num(key, value)?,
            "gen_per_class" => self.gen.per_class = num(key, value)?,
            "gen_dim" => self.gen.dim = num(key, value)?,
            "gen_sep" => self.gen.sep = num(key, value)?,
            "test_fraction" => self.test_fraction = num(key, value)?,
            "label_fraction" => self.label_fraction = num(key, value)?,
            "label_noise" => self.label_noise = num(key, value)?,
            "eval_every" => self.eval_every = num(key, value)?,
            "checkpoint_every" => self.checkpoint_every = num(key, value)?,
            "linear_probe" => self.linear_probe = num(key, value)?,
            "out" => self.out = value.to_string(),
            "epochs" => t.epochs = num(key, value)?,
            "batch_size" => t.batch_size = num(key, value)?,
            "lr" => t.base_lr = num(key, value)?,
            "weight_decay" => t.weight_decay = num(key, value)?,
            "sgd_momentum" => t.sgd_momentum = num(key, value)?,
            "ema_momentum" => t.ema_momentum = num(key, value)?,
            "bank_capacity" => t.bank_capacity = num(key, value)?,
            "k" => {
                t.constraint.k = match value {
                    "all" => NeighborCount::All,
                    v => NeighborCount::Top(num(key, v)?),
                }
            }
            "include_target" => t.constraint.include_target = num(key, value)?,
            "k_prime" => match &mut t.constraint.mode {
                ConstraintMode::SelfAug { k_prime } | ConstraintMode::Cross { k_prime } => *k_prime = num(key, value)?,
                _ => return Err(na()),
            },
            "threshold" => match &mut t.constraint.mode {
                ConstraintMode::SemiSupervised { threshold } => *threshold = num(key, value)?,
                _ => return Err(na()),
            },
            "loss_weight" => t.loss_weight = num(key, value)?,
            "msf_aux_weight" => t.msf_aux_weight = num(key, value)?,
            "head_kind" => {
                t.head_kind = match value {
                    "mlp" => HeadKind::Mlp,
                    v => match v.strip_prefix("knn:") {
                        Some(k) => HeadKind::Knn { k: num(key, k)? },
                        None => return Err(bad()),
                    },
                }
            }
            "head_hidden" => t.head.hidden = num(key, value)?,
            "head_epochs" => t.head.train.epochs = num(key, value)?,
            "head_lr" => t.head.train.lr = num(key, value)?,
            "head_momentum" => t.head.train.momentum = num(key, value)?,
            "head_weight_decay" => t.head.train.weight_decay = num(key, value)?,
            "head_batch_size" => t.head.train.batch_size = num(key, value)?,
            "head_per_epoch" => t.head_per_epoch = num(key, value)?,
            "hidden" => t.hidden = num(key, value)?,
            "embed" => t.embed = num(key, value)?,
            "predictor_hidden" => t.predictor_hidden = num(key, value)?,
            "cross_dim" => t.cross_dim = num(key, value)?,
            _ => {
                let (aug, field) = match key.split_once('_') {
                    Some(("aug1", f)) => (&mut t.aug1, f),
                    Some(("aug2", f)) => (&mut t.aug2, f),
                    _ => return Err(ConfigError::UnknownKey(key.to_string())),
                };
                set_aug(aug, field, key, value)?;
            }
        }
        Ok(())
    }

    /// Every resolved key in a fixed order, in the config file format.
    pub fn snapshot(&self) -> String {
        let t = &self.train;
        let mut s = String::new();
        let mut put = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        put("mode", self.method.name().into());
        put("seed", t.seed.to_string());
        put("data", self.data.clone());
        put("gen_classes", self.gen.classes.to_string());
        put("gen_per_class", self.gen.per_class.to_string());
        put("gen_dim", self.gen.dim.to_string());
        put("gen_sep", self.gen.sep.to_string());
        put("test_fraction", self.test_fraction.to_string());
        put("label_fraction", self.label_fraction.to_string());
        put("label_noise", self.label_noise.to_string());
        put("epochs", t.epochs.to_string());
        put("batch_size", t.batch_size.to_string());
        put("lr", t.base_lr.to_string());
        put("weight_decay", t.weight_decay.to_string());
        put("sgd_momentum", t.sgd_momentum.to_string());
        put("ema_momentum", t.ema_momentum.to_string());
        put("bank_capacity", t.bank_capacity.to_string());
        put(
            "k",
            match t.constraint.k {
                NeighborCount::Top(k) => k.to_string(),
                NeighborCount::All => "all".into(),
            },
        );
        put("include_target", t.constraint.include_target.to_string());
        match t.constraint.mode {
            ConstraintMode::SelfAug { k_prime } | ConstraintMode::Cross { k_prime } => put("k_prime", k_prime.to_string()),
            ConstraintMode::SemiSupervised { threshold } => put("threshold", threshold.to_string()),
            _ => {}
        }
        put("loss_weight", t.loss_weight.to_string());
        put("msf_aux_weight", t.msf_aux_weight.to_string());
        for (name, a) in [("aug1", &t.aug1), ("aug2", &t.aug2)] {
            put(&format!("{name}_sigma"), a.gaussian_sigma.to_string());
            put(&format!("{name}_dropout"), a.dropout_p.to_string());
            put(&format!("{name}_scale_lo"), a.scale_lo.to_string());
            put(&format!("{name}_scale_hi"), a.scale_hi.to_string());
        }
        put(
            "head_kind",
            match t.head_kind {
                HeadKind::Mlp => "mlp".into(),
                HeadKind::Knn { k } => format!("knn:{k}"),
            },
        );
        put("head_hidden", t.head.hidden.to_string());
        put("head_epochs", t.head.train.epochs.to_string());
        put("head_lr", t.head.train.lr.to_string());
        put("head_momentum", t.head.train.momentum.to_string());
        put("head_weight_decay", t.head.train.weight_decay.to_string());
        put("head_batch_size", t.head.train.batch_size.to_string());
        put("head_per_epoch", t.head_per_epoch.to_string());
        put("hidden", t.hidden.to_string());
        put("embed", t.embed.to_string());
        put("predictor_hidden", t.predictor_hidden.to_string());
        put("cross_dim", t.cross_dim.to_string());
        put("eval_every", self.eval_every.to_string());
        put("checkpoint_every", self.checkpoint_every.to_string());
        put("linear_probe", self.linear_probe.to_string());
        put("out", self.out.clone());
        s
    }
}

fn num<T: FromStr>(key: &str, value: &str) -> Result<T, ConfigError> {
    value.parse().map_err(|_| ConfigError::BadValue { key: key.to_string(), value: value.to_string() })
}

fn set_aug(aug: &mut AugmentSpec, field: &str, key: &str, value: &str) -> Result<(), ConfigError> {
    let slot = match field {
        "sigma" => &mut aug.gaussian_sigma,
        "dropout" => &mut aug.dropout_p,
        "scale_lo" => &mut aug.scale_lo,
        "scale_hi" => &mut aug.scale_hi,
        _ => return Err(ConfigError::UnknownKey(key.to_string())),
    };
    *slot = num(key, value)?;
    Ok(())
}

/// Parses `key = value` lines. `#` starts a comment; blank lines are skipped.
pub fn parse_entries(text: &str) -> Result<Vec<(String, String)>, ConfigError> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        match line.split_once('=') {
            Some((k, v)) if !k.trim().is_empty() => out.push((k.trim().to_string(), v.trim().to_string())),
            _ => return Err(ConfigError::Syntax { line: i + 1, text: raw.to_string() }),
        }
    }
    Ok(out)
}
