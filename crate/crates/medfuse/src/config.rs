//! Plain-text run configuration: `key = value` lines, `#` comments.
//!
//! Resolution order is: task defaults, then the config file, then `--set`
//! overrides, then `--seed`. `to_text` writes every key in a fixed order, and
//! its FNV-1a hash identifies the configuration inside checkpoints.

use std::hash::Hasher;

use medfuse_core::data::LabelSchema;
use medfuse_core::modality::ModalitySet;
use medfuse_core::train::RunConfig;

use crate::error::ConfigError;

/// Every recognised key, in serialization order.
pub const KEYS: &[&str] = &[
    "task",
    "d",
    "tokens",
    "d_r",
    "n_l",
    "insert_pos",
    "heads",
    "p_drop",
    "lambda_lm",
    "lambda_mc",
    "lambda_unlikely",
    "lambda_dig",
    "lambda_r",
    "lambda_m",
    "margin",
    "tau",
    "epsilon",
    "lr",
    "beta1",
    "beta2",
    "eps_opt",
    "grad_clip",
    "batch_size",
    "max_steps",
    "validate_every",
    "patience",
    "lr_patience",
    "seed",
    "prompt",
    "candidates",
    "modalities",
    "modality_dropout",
    "gallery",
    "bootstrap",
    "bootstrap_seed",
];

/// `(line, key, value)` triples of a config file, in file order.
pub fn parse_pairs(text: &str) -> Result<Vec<(usize, String, String)>, ConfigError> {
    let mut out: Vec<(usize, String, String)> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap().trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or(ConfigError::Syntax { line: i + 1 })?;
        let k = k.trim();
        if k.is_empty() {
            return Err(ConfigError::Syntax { line: i + 1 });
        }
        if !KEYS.contains(&k) {
            return Err(ConfigError::UnknownKey(k.to_string()));
        }
        if out.iter().any(|(_, prev, _)| prev == k) {
            return Err(ConfigError::BadValue {
                key: k.into(),
                value: v.trim().into(),
                reason: format!("duplicate key on line {}", i + 1),
            });
        }
        out.push((i + 1, k.to_string(), v.trim().to_string()));
    }
    Ok(out)
}

fn bad<T>(key: &str, value: &str, reason: impl Into<String>) -> Result<T, ConfigError> {
    Err(ConfigError::BadValue {
        key: key.into(),
        value: value.into(),
        reason: reason.into(),
    })
}

fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, ConfigError>
where
    T::Err: std::fmt::Display,
{
    value.parse().or_else(|e: T::Err| bad(key, value, e.to_string()))
}

/// Apply one key. `task` is rejected here: it is fixed before defaults are chosen.
pub fn set(cfg: &mut RunConfig, key: &str, value: &str) -> Result<(), ConfigError> {
    let w = &mut cfg.weights;
    match key {
        "task" => return bad(key, value, "the task selects defaults and cannot be overridden"),
        "d" => cfg.d = num(key, value)?,
        "tokens" => cfg.tokens = num(key, value)?,
        "d_r" => cfg.d_r = num(key, value)?,
        "n_l" => cfg.n_l = num(key, value)?,
        "insert_pos" => cfg.insert_pos = num(key, value)?,
        "heads" => cfg.heads = num(key, value)?,
        "p_drop" => cfg.p_drop = num(key, value)?,
        "lambda_lm" => w.lambda_lm = num(key, value)?,
        "lambda_mc" => w.lambda_mc = num(key, value)?,
        "lambda_unlikely" => w.lambda_unlikely = num(key, value)?,
        "lambda_dig" => w.lambda_dig = num(key, value)?,
        "lambda_r" => w.lambda_r = num(key, value)?,
        "lambda_m" => w.lambda_m = num(key, value)?,
        "margin" => w.margin = num(key, value)?,
        "tau" => w.tau = num(key, value)?,
        "epsilon" => w.epsilon = num(key, value)?,
        "lr" => cfg.lr = num(key, value)?,
        "beta1" => cfg.beta1 = num(key, value)?,
        "beta2" => cfg.beta2 = num(key, value)?,
        "eps_opt" => cfg.eps_opt = num(key, value)?,
        "grad_clip" => cfg.grad_clip = num(key, value)?,
        "batch_size" => cfg.batch_size = num(key, value)?,
        "max_steps" => cfg.max_steps = num(key, value)?,
        "validate_every" => cfg.validate_every = num(key, value)?,
        "patience" => cfg.patience = num(key, value)?,
        "lr_patience" => cfg.lr_patience = num(key, value)?,
        "seed" => cfg.seed = num(key, value)?,
        "prompt" => cfg.prompt = value.to_string(),
        "candidates" => {
            cfg.candidates = if value.is_empty() {
                Vec::new()
            } else {
                value.split('|').map(|c| c.trim().to_string()).collect()
            };
            if cfg.candidates.iter().any(String::is_empty) {
                return bad(key, value, "empty candidate");
            }
        }
        "modalities" => {
            cfg.modalities = match ModalitySet::parse(value) {
                Some(m) => m,
                None => return bad(key, value, "expected a tag such as `tsm` or a list such as `lab,ecg`"),
            }
        }
        "modality_dropout" => cfg.modality_dropout = num(key, value)?,
        "gallery" => cfg.gallery = num(key, value)?,
        "bootstrap" => cfg.bootstrap = num(key, value)?,
        "bootstrap_seed" => cfg.bootstrap_seed = num(key, value)?,
        _ => return Err(ConfigError::UnknownKey(key.to_string())),
    }
    Ok(())
}

pub fn get(cfg: &RunConfig, key: &str) -> Option<String> {
    let w = &cfg.weights;
    Some(match key {
        "task" => cfg.task.name().to_string(),
        "d" => cfg.d.to_string(),
        "tokens" => cfg.tokens.to_string(),
        "d_r" => cfg.d_r.to_string(),
        "n_l" => cfg.n_l.to_string(),
        "insert_pos" => cfg.insert_pos.to_string(),
        "heads" => cfg.heads.to_string(),
        "p_drop" => cfg.p_drop.to_string(),
        "lambda_lm" => w.lambda_lm.to_string(),
        "lambda_mc" => w.lambda_mc.to_string(),
        "lambda_unlikely" => w.lambda_unlikely.to_string(),
        "lambda_dig" => w.lambda_dig.to_string(),
        "lambda_r" => w.lambda_r.to_string(),
        "lambda_m" => w.lambda_m.to_string(),
        "margin" => w.margin.to_string(),
        "tau" => w.tau.to_string(),
        "epsilon" => w.epsilon.to_string(),
        "lr" => cfg.lr.to_string(),
        "beta1" => cfg.beta1.to_string(),
        "beta2" => cfg.beta2.to_string(),
        "eps_opt" => cfg.eps_opt.to_string(),
        "grad_clip" => cfg.grad_clip.to_string(),
        "batch_size" => cfg.batch_size.to_string(),
        "max_steps" => cfg.max_steps.to_string(),
        "validate_every" => cfg.validate_every.to_string(),
        "patience" => cfg.patience.to_string(),
        "lr_patience" => cfg.lr_patience.to_string(),
        "seed" => cfg.seed.to_string(),
        "prompt" => cfg.prompt.clone(),
        "candidates" => cfg.candidates.join(" | "),
        "modalities" => cfg.modalities.tag(),
        "modality_dropout" => cfg.modality_dropout.to_string(),
        "gallery" => cfg.gallery.to_string(),
        "bootstrap" => cfg.bootstrap.to_string(),
        "bootstrap_seed" => cfg.bootstrap_seed.to_string(),
        _ => return None,
    })
}

/// Full serialization, one `key = value` line per key.
pub fn to_text(cfg: &RunConfig) -> String {
    let mut s = String::new();
    for key in KEYS {
        s.push_str(key);
        s.push_str(" = ");
        s.push_str(&get(cfg, key).unwrap());
        s.push('\n');
    }
    s
}

/// FNV-1a 64 over the bytes of `text`.
pub fn hash_text(text: &str) -> u64 {
    let mut h = fnv::FnvHasher::default();
    h.write(text.as_bytes());
    h.finish()
}

pub fn config_hash(cfg: &RunConfig) -> u64 {
    hash_text(&to_text(cfg))
}

/// Resolve a configuration from the task flag, an optional config file text,
/// `key=value` overrides and an optional seed override, then validate it.
pub fn resolve(
    task: Option<LabelSchema>,
    file: Option<&str>,
    overrides: &[String],
    seed: Option<u64>,
) -> Result<RunConfig, ConfigError> {
    let pairs = match file {
        Some(text) => parse_pairs(text)?,
        None => Vec::new(),
    };
    let file_task = pairs
        .iter()
        .find(|(_, k, _)| k == "task")
        .map(|(_, k, v)| v.parse::<LabelSchema>().or_else(|_| bad(k, v, "expected diagnosis, prognosis or retrieval")))
        .transpose()?;
    let task = task
        .or(file_task)
        .ok_or_else(|| ConfigError::Invalid("no task given on the command line or in the config file".into()))?;
    let mut cfg = RunConfig::for_task(task);
    for (_, k, v) in pairs.iter().filter(|(_, k, _)| k != "task") {
        set(&mut cfg, k, v)?;
    }
    for o in overrides {
        let (k, v) = o
            .split_once('=')
            .ok_or_else(|| ConfigError::Invalid(format!("override `{}` is not key=value", o)))?;
        let k = k.trim();
        if !KEYS.contains(&k) {
            return Err(ConfigError::UnknownKey(k.to_string()));
        }
        set(&mut cfg, k, v.trim())?;
    }
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
    Ok(cfg)
}

/// Parse the output of `to_text` (or any complete config file) back.
pub fn from_text(text: &str) -> Result<RunConfig, ConfigError> {
    resolve(None, Some(text), &[], None)
}
