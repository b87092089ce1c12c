//! JSON run configuration.
//!
//! Keys are namespaced (`adv.*`, `enc.*`, `loss.*`, `train.*`, `eval.*`) and
//! may be written nested, dotted, or mixed:
//!
//! ```json
//! { "train": { "epochs": 5 }, "loss.lambda2": 0.1, "adv.gumbel.tau": 0.5 }
//! ```
//!
//! Absent keys keep their defaults; unknown keys are rejected.

use std::path::Path;

use mmssl_core::trainer::Config;
use serde_json::{json, Map, Value};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const SEED_ENV: &str = "MMSSL_SEED";

fn flatten(prefix: &str, v: &Value, out: &mut Vec<(String, Value)>) {
    match v {
        Value::Object(map) => {
            for (k, v) in map {
                let key = if prefix.is_empty() {
                    k.clone()
                } else {
                    format!("{prefix}.{k}")
                };
                flatten(&key, v, out);
            }
        }
        _ => out.push((prefix.to_string(), v.clone())),
    }
}

fn num(key: &str, v: &Value) -> Result<f64> {
    v.as_f64()
        .ok_or_else(|| Error::Config(format!("{key} must be a number, got {v}")))
}

fn count(key: &str, v: &Value) -> Result<usize> {
    v.as_u64()
        .map(|n| n as usize)
        .ok_or_else(|| Error::Config(format!("{key} must be a non-negative integer, got {v}")))
}

fn flag(key: &str, v: &Value) -> Result<bool> {
    v.as_bool()
        .ok_or_else(|| Error::Config(format!("{key} must be true or false, got {v}")))
}

fn opt_count(key: &str, v: &Value) -> Result<Option<usize>> {
    if v.is_null() {
        Ok(None)
    } else {
        count(key, v).map(Some)
    }
}

/// Assign one dotted key.
pub fn set_key(cfg: &mut Config, key: &str, v: &Value) -> Result<()> {
    let (a, e, l, t) = (&mut cfg.adv, &mut cfg.enc, &mut cfg.loss, &mut cfg.train);
    match key {
        "adv.gumbel.tau" => a.gumbel.tau = num(key, v)?,
        "adv.gumbel.zeta" => a.gumbel.zeta = num(key, v)?,
        "adv.lambda1" => a.lambda1 = num(key, v)?,
        "adv.d_steps" => a.d_steps = count(key, v)?,
        "adv.block_rows" => a.block_rows = count(key, v)?,
        "adv.negate_critic" => a.negate_critic = flag(key, v)?,
        "adv.gen_dropout" => a.gen_dropout = num(key, v)?,
        "adv.critic.hidden" => a.critic.hidden = opt_count(key, v)?,
        "adv.critic.leaky_slope" => a.critic.leaky_slope = num(key, v)?,
        "adv.critic.dropout" => a.critic.dropout = num(key, v)?,
        "adv.critic.bn_momentum" => a.critic.bn_momentum = num(key, v)?,
        "adv.critic.bn_eps" => a.critic.bn_eps = num(key, v)?,
        "enc.heads" => e.heads = count(key, v)?,
        "enc.layers" => e.layers = count(key, v)?,
        "enc.eta" => e.eta = num(key, v)?,
        "enc.topk" => e.topk = count(key, v)?,
        "enc.refresh_every" => e.refresh_every = count(key, v)?,
        "loss.lambda2" => l.lambda2 = num(key, v)?,
        "loss.lambda3" => l.lambda3 = num(key, v)?,
        "loss.lambda4" => l.lambda4 = num(key, v)?,
        "loss.tau_prime" => l.tau_prime = num(key, v)?,
        "loss.omega" => l.omega = num(key, v)?,
        "loss.literal_log_ratio" => l.literal_log_ratio = flag(key, v)?,
        "train.epochs" => t.epochs = count(key, v)?,
        "train.steps_per_epoch" => t.steps_per_epoch = opt_count(key, v)?,
        "train.batch_size" => t.batch_size = count(key, v)?,
        "train.lr_gen" => t.lr_gen = num(key, v)?,
        "train.lr_disc" => t.lr_disc = num(key, v)?,
        "train.weight_decay" => t.weight_decay = num(key, v)?,
        "train.lr_decay" => t.lr_decay = num(key, v)?,
        "train.seed" => {
            t.seed = v
                .as_u64()
                .ok_or_else(|| Error::Config(format!("{key} must be a non-negative integer, got {v}")))?
        }
        "train.dim" => t.dim = count(key, v)?,
        "train.patience" => t.patience = count(key, v)?,
        "train.disable_asl" => t.disable_asl = flag(key, v)?,
        "train.disable_cl" => t.disable_cl = flag(key, v)?,
        "train.disable_gumbel" => t.disable_gumbel = flag(key, v)?,
        "eval.k" => cfg.eval.k = count(key, v)?,
        "eval.buckets" => {
            let arr = v
                .as_array()
                .ok_or_else(|| Error::Config(format!("{key} must be an array of integers")))?;
            cfg.eval.buckets = arr.iter().map(|x| count(key, x)).collect::<Result<_>>()?;
        }
        _ => return Err(Error::Config(format!("unknown key {key:?}"))),
    }
    Ok(())
}

/// Defaults overridden by every key of `doc`, then validated.
pub fn from_json(doc: &Value) -> Result<Config> {
    if !doc.is_object() {
        return Err(Error::Config("top level must be a JSON object".into()));
    }
    let mut flat = Vec::new();
    flatten("", doc, &mut flat);
    let mut cfg = Config::default();
    for (k, v) in &flat {
        set_key(&mut cfg, k, v)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn parse(text: &str) -> Result<Config> {
    let doc: Value = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
    from_json(&doc)
}

pub fn load(path: &Path) -> Result<Config> {
    let text = std::fs::read_to_string(path).map_err(Error::io(path))?;
    parse(&text).map_err(|e| match e {
        Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
        e => e,
    })
}

/// Apply a `MMSSL_SEED`-style override.
pub fn apply_seed_override(cfg: &mut Config, value: Option<&str>) -> Result<()> {
    if let Some(s) = value {
        cfg.train.seed = s
            .trim()
            .parse()
            .map_err(|_| Error::Config(format!("{SEED_ENV}={s:?} is not an unsigned integer")))?;
    }
    Ok(())
}

/// Nested JSON of every key.
pub fn to_json(cfg: &Config) -> Value {
    let (a, e, l, t) = (&cfg.adv, &cfg.enc, &cfg.loss, &cfg.train);
    json!({
        "adv": {
            "gumbel": { "tau": a.gumbel.tau, "zeta": a.gumbel.zeta },
            "lambda1": a.lambda1,
            "d_steps": a.d_steps,
            "block_rows": a.block_rows,
            "negate_critic": a.negate_critic,
            "gen_dropout": a.gen_dropout,
            "critic": {
                "hidden": a.critic.hidden,
                "leaky_slope": a.critic.leaky_slope,
                "dropout": a.critic.dropout,
                "bn_momentum": a.critic.bn_momentum,
                "bn_eps": a.critic.bn_eps,
            },
        },
        "enc": {
            "heads": e.heads,
            "layers": e.layers,
            "eta": e.eta,
            "topk": e.topk,
            "refresh_every": e.refresh_every,
        },
        "loss": {
            "lambda2": l.lambda2,
            "lambda3": l.lambda3,
            "lambda4": l.lambda4,
            "tau_prime": l.tau_prime,
            "omega": l.omega,
            "literal_log_ratio": l.literal_log_ratio,
        },
        "train": {
            "epochs": t.epochs,
            "steps_per_epoch": t.steps_per_epoch,
            "batch_size": t.batch_size,
            "lr_gen": t.lr_gen,
            "lr_disc": t.lr_disc,
            "weight_decay": t.weight_decay,
            "lr_decay": t.lr_decay,
            "seed": t.seed,
            "dim": t.dim,
            "patience": t.patience,
            "disable_asl": t.disable_asl,
            "disable_cl": t.disable_cl,
            "disable_gumbel": t.disable_gumbel,
        },
        "eval": { "k": cfg.eval.k, "buckets": cfg.eval.buckets },
    })
}

/// Canonical text: sorted keys, no whitespace.
pub fn canonical(cfg: &Config) -> String {
    fn sort(v: &Value) -> Value {
        match v {
            Value::Object(m) => {
                let mut keys: Vec<&String> = m.keys().collect();
                keys.sort();
                let mut out = Map::new();
                for k in keys {
                    out.insert(k.clone(), sort(&m[k]));
                }
                Value::Object(out)
            }
            v => v.clone(),
        }
    }
    sort(&to_json(cfg)).to_string()
}

pub fn hash(cfg: &Config) -> [u8; 32] {
    Sha256::digest(canonical(cfg).as_bytes()).into()
}
