//! Line-oriented `key = value` training configuration files.
//!
//! `#` starts a comment; blank lines are ignored; unknown keys and
//! unparseable values are errors naming the key. Unset keys keep the
//! defaults of [`TrainConfig::default`].

use std::path::Path;
use std::str::FromStr;

use crate::curvature::HessianMode;
use crate::error::{Error, Result};
use crate::trainer::{ArchKind, GgnAt, InitKind, TrainConfig};

/// Threshold used by `hessian_mode = mixed` unless `mixed_threshold` is set.
pub const DEFAULT_MIXED_THRESHOLD: usize = 256;

pub const KEYS: &[&str] = &[
    "lr",
    "alpha",
    "batch_size",
    "max_epochs",
    "mc_samples",
    "mc_samples_per_step",
    "prior_precision",
    "seed",
    "adam_beta1",
    "adam_beta2",
    "adam_eps",
    "scheduler_factor",
    "scheduler_patience",
    "early_stop_patience",
    "hessian_mode",
    "mixed_threshold",
    "sigma_d",
    "ggn_at",
    "init",
    "arch",
    "latent_dim",
    "hidden",
    "channels",
    "val_size",
    "max_train",
];

fn num<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| Error::Config {
        key: key.into(),
        reason: format!("cannot parse `{v}`"),
    })
}

/// Comma-separated list; an empty value is the empty list.
fn list(key: &str, v: &str) -> Result<Vec<usize>> {
    if v.is_empty() {
        return Ok(Vec::new());
    }
    v.split(',').map(|p| num(key, p.trim())).collect()
}

fn choice<T: Copy>(key: &str, v: &str, options: &[(&str, T)]) -> Result<T> {
    options.iter().find(|(n, _)| *n == v).map(|(_, t)| *t).ok_or_else(|| Error::Config {
        key: key.into(),
        reason: format!(
            "`{v}` is not one of {}",
            options.iter().map(|(n, _)| *n).collect::<Vec<_>>().join("|")
        ),
    })
}

pub fn parse_config_str(text: &str) -> Result<TrainConfig> {
    let mut cfg = TrainConfig::default();
    let mut mode_name: Option<String> = None;
    let mut threshold = DEFAULT_MIXED_THRESHOLD;
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap().trim();
        if line.is_empty() {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(Error::Config {
                key: format!("line {}", lineno + 1),
                reason: format!("expected `key = value`, got `{line}`"),
            });
        };
        let (k, v) = (k.trim(), v.trim());
        match k {
            "lr" => cfg.lr = num(k, v)?,
            "alpha" => cfg.alpha = num(k, v)?,
            "batch_size" => cfg.batch_size = num(k, v)?,
            "max_epochs" => cfg.max_epochs = num(k, v)?,
            "mc_samples" => cfg.mc_samples = num(k, v)?,
            "mc_samples_per_step" => cfg.mc_samples_per_step = num(k, v)?,
            "prior_precision" => cfg.prior_precision = num(k, v)?,
            "seed" => cfg.seed = num(k, v)?,
            "adam_beta1" => cfg.adam_beta1 = num(k, v)?,
            "adam_beta2" => cfg.adam_beta2 = num(k, v)?,
            "adam_eps" => cfg.adam_eps = num(k, v)?,
            "scheduler_factor" => cfg.scheduler_factor = num(k, v)?,
            "scheduler_patience" => cfg.scheduler_patience = num(k, v)?,
            "early_stop_patience" => cfg.early_stop_patience = num(k, v)?,
            "hessian_mode" => mode_name = Some(v.to_string()),
            "mixed_threshold" => threshold = num(k, v)?,
            "sigma_d" => cfg.sigma_d = num(k, v)?,
            "ggn_at" => cfg.ggn_at = choice(k, v, &[("pre", GgnAt::Pre), ("post", GgnAt::Post)])?,
            "init" => cfg.init = choice(k, v, &[("zero", InitKind::Zero), ("fan_in", InitKind::FanIn)])?,
            "arch" => cfg.arch = choice(k, v, &[("mlp", ArchKind::Mlp), ("conv", ArchKind::Conv)])?,
            "latent_dim" => cfg.latent_dim = num(k, v)?,
            "hidden" => cfg.hidden = list(k, v)?,
            "channels" => cfg.channels = list(k, v)?,
            "val_size" => cfg.val_size = num(k, v)?,
            "max_train" => cfg.max_train = num(k, v)?,
            _ => {
                return Err(Error::Config {
                    key: k.into(),
                    reason: "unknown key".into(),
                })
            }
        }
    }
    if let Some(name) = mode_name {
        cfg.hessian_mode = HessianMode::parse(&name, threshold).map_err(|e| Error::Config {
            key: "hessian_mode".into(),
            reason: e.to_string(),
        })?;
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn parse_config(path: &Path) -> Result<TrainConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| {
        Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))
    })?;
    parse_config_str(&text)
}
