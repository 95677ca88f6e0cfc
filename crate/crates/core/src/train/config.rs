//! Key-value training configuration files.
//!
//! One `key = value` pair per line; blank lines and lines starting with `#`
//! are ignored. Recognised keys:
//!
//! | key             | meaning                                               |
//! |-----------------|-------------------------------------------------------|
//! | `k`             | batch size                                            |
//! | `epochs`        | passes over the training data                         |
//! | `lr`            | initial learning rate                                 |
//! | `lr_decay_step` | step at which the rate drops                          |
//! | `lr_decayed`    | rate after the drop                                   |
//! | `seed`          | initialisation and shuffling seed                     |
//! | `dims`          | `d,h1,h2,...`: embedding size then tower layer sizes  |
//! | `fusion`        | comma-separated fusion (or final) layer sizes         |
//! | `model`         | `dot` or `joint`                                      |
//! | `loss`          | `multiple_negatives` (or `mn`) or `sigmoid`           |
//! | `features`      | 1 (body) or 2 (body and subject)                      |

use std::collections::BTreeMap;

use super::{LossKind, LrSchedule, TrainConfig};
use crate::error::{Error, Result};

pub const ENCODER_KEYS: &[&str] = &[
    "k",
    "epochs",
    "lr",
    "lr_decay_step",
    "lr_decayed",
    "seed",
    "dims",
    "fusion",
    "model",
    "loss",
    "features",
];

/// Splits `key = value` lines; blank lines and `#` comments are skipped and
/// later keys replace earlier ones.
pub fn parse_key_values(text: &str) -> Result<BTreeMap<String, String>> {
    let mut pairs = BTreeMap::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
        pairs.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(pairs)
}

/// Parsed configuration; unset keys are `None`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainFile {
    pub k: Option<usize>,
    pub epochs: Option<usize>,
    pub lr: Option<f64>,
    pub lr_decay_step: Option<usize>,
    pub lr_decayed: Option<f64>,
    pub seed: Option<u64>,
    pub dims: Option<Vec<usize>>,
    pub fusion: Option<Vec<usize>>,
    pub model: Option<String>,
    pub loss: Option<LossKind>,
    pub features: Option<usize>,
}

fn parse_num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("invalid value {v:?} for key {key}")))
}

fn parse_list(key: &str, v: &str) -> Result<Vec<usize>> {
    if v.trim().is_empty() {
        return Ok(Vec::new());
    }
    v.split(',').map(|s| parse_num(key, s.trim())).collect()
}

impl TrainFile {
    pub fn parse(text: &str) -> Result<Self> {
        Self::from_pairs(&parse_key_values(text)?)
    }

    pub fn from_pairs(pairs: &BTreeMap<String, String>) -> Result<Self> {
        let mut f = TrainFile::default();
        for (key, v) in pairs {
            match key.as_str() {
                "k" => f.k = Some(parse_num(key, v)?),
                "epochs" => f.epochs = Some(parse_num(key, v)?),
                "lr" => f.lr = Some(parse_num(key, v)?),
                "lr_decay_step" => f.lr_decay_step = Some(parse_num(key, v)?),
                "lr_decayed" => f.lr_decayed = Some(parse_num(key, v)?),
                "seed" => f.seed = Some(parse_num(key, v)?),
                "dims" => f.dims = Some(parse_list(key, v)?),
                "fusion" => f.fusion = Some(parse_list(key, v)?),
                "model" => match v.as_str() {
                    "dot" | "joint" => f.model = Some(v.clone()),
                    other => return Err(Error::Config(format!("unknown model {other:?}"))),
                },
                "loss" => f.loss = Some(LossKind::parse(v)?),
                "features" => f.features = Some(parse_num(key, v)?),
                other => return Err(Error::Config(format!("unknown config key {other:?}"))),
            }
        }
        Ok(f)
    }

    /// Values set in `other` replace those in `self`.
    pub fn overlay(mut self, other: &TrainFile) -> Self {
        macro_rules! take {
            ($($f:ident),*) => { $( if other.$f.is_some() { self.$f = other.$f.clone(); } )* };
        }
        take!(k, epochs, lr, lr_decay_step, lr_decayed, seed, dims, fusion, model, loss, features);
        self
    }

    pub fn train_config(&self) -> TrainConfig {
        let base = TrainConfig::default();
        let desk = LrSchedule::desk();
        TrainConfig {
            batch_size: self.k.unwrap_or(base.batch_size),
            epochs: self.epochs.unwrap_or(base.epochs),
            schedule: LrSchedule {
                initial: self.lr.unwrap_or(desk.initial),
                decay_step: self.lr_decay_step.unwrap_or(desk.decay_step),
                decayed: self.lr_decayed.unwrap_or(desk.decayed),
            },
            seed: self.seed.unwrap_or(base.seed),
            loss: self.loss.unwrap_or(base.loss),
        }
    }

    /// Embedding size and tower sizes, if `dims` was given.
    pub fn split_dims(&self) -> Result<Option<(usize, Vec<usize>)>> {
        match &self.dims {
            None => Ok(None),
            Some(d) if d.is_empty() => Err(Error::Config("dims must list at least the embedding size".into())),
            Some(d) => Ok(Some((d[0], d[1..].to_vec()))),
        }
    }
}
