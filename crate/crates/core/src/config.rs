//! Flat `key = value` run configuration.
//!
//! Blank lines and `#` comments are ignored. A key may repeat only with the
//! same value. Overrides (from the command line) are applied after the file
//! and win over it. [`RunConfig::render`] writes every key back out in a
//! fixed order, and parsing that text yields the same configuration.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::{DatasetSpec, TaskKind};
use crate::error::{Error, Result};
use crate::optim::{LrSchedule, OptimizerConfig, OptimizerKind};
use crate::search::{Regime, SearchConfig, UpdateOrder};
use crate::space::{Activation, NetConfig};

/// Which supernet a run uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Space {
    #[serde(rename = "nas201-desk")]
    Nas201Desk,
    #[serde(rename = "micro")]
    Micro,
}

impl Space {
    pub fn net(self) -> NetConfig {
        match self {
            Space::Nas201Desk => NetConfig::desk_nas201(),
            Space::Micro => NetConfig::micro(),
        }
    }
}

impl FromStr for Space {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "nas201-desk" => Ok(Space::Nas201Desk),
            "micro" => Ok(Space::Micro),
            _ => Err(Error::invalid(format!(
                "unknown space `{s}` (expected nas201-desk or micro)"
            ))),
        }
    }
}

impl fmt::Display for Space {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Space::Nas201Desk => "nas201-desk",
            Space::Micro => "micro",
        })
    }
}

/// Everything a search or experiment run needs, in one flat record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub space: Space,
    pub regime: Regime,
    pub activation: Activation,
    /// `None` uses the activation's default.
    pub alpha_init: Option<f64>,
    pub epochs: usize,
    pub batch_size: usize,
    /// Weight learning rate (peak of the schedule).
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub schedule: LrSchedule,
    /// Optimizer of α.
    pub optimizer: OptimizerKind,
    /// `None`: 3e-4 for Adam, `lr` for SGD.
    pub alpha_lr: Option<f64>,
    pub order: UpdateOrder,
    pub seed: u64,
    /// Seed list of experiment sweeps.
    pub seeds: Vec<u64>,
    pub record_corr: bool,
    pub task: TaskKind,
    pub linear_share: f64,
    pub directions: usize,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub data_seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        let d = DatasetSpec::default();
        let s = SearchConfig::desk(Regime::Bilevel);
        RunConfig {
            space: Space::Nas201Desk,
            regime: s.regime,
            activation: s.activation,
            alpha_init: None,
            epochs: s.epochs,
            batch_size: s.batch_size,
            lr: s.w_opt.lr,
            momentum: s.w_opt.momentum,
            weight_decay: s.w_opt.weight_decay,
            schedule: s.lr_schedule,
            optimizer: s.alpha_opt.kind,
            alpha_lr: None,
            order: s.order,
            seed: 0,
            seeds: vec![0, 1, 2, 3, 4],
            record_corr: false,
            task: d.kind,
            linear_share: d.linear_share,
            directions: d.directions,
            n_train: d.n_train,
            n_val: d.n_val,
            n_test: d.n_test,
            data_seed: d.seed,
        }
    }
}

/// Keys in rendering order.
pub const KEYS: [&str; 23] = [
    "space",
    "regime",
    "activation",
    "alpha_init",
    "epochs",
    "batch_size",
    "lr",
    "momentum",
    "weight_decay",
    "schedule",
    "optimizer",
    "alpha_lr",
    "order",
    "seed",
    "seeds",
    "record_corr",
    "task",
    "linear_share",
    "directions",
    "n_train",
    "n_val",
    "n_test",
    "data_seed",
];

fn num<T: FromStr>(v: &str) -> std::result::Result<T, String> {
    v.parse().map_err(|_| format!("cannot parse `{v}`"))
}

fn opt_f64(v: &str) -> std::result::Result<Option<f64>, String> {
    if v == "default" {
        Ok(None)
    } else {
        num(v).map(Some)
    }
}

fn named<T: FromStr<Err = Error>>(v: &str) -> std::result::Result<T, String> {
    v.parse().map_err(|e: Error| e.to_string())
}

fn show_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "default".to_string(), |x| x.to_string())
}

impl RunConfig {
    /// Sets one key; the error text does not include the key.
    pub fn set(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
        match key {
            "space" => self.space = named(value)?,
            "regime" => self.regime = named(value)?,
            "activation" => self.activation = named(value)?,
            "alpha_init" => self.alpha_init = opt_f64(value)?,
            "epochs" => self.epochs = num(value)?,
            "batch_size" => self.batch_size = num(value)?,
            "lr" => self.lr = num(value)?,
            "momentum" => self.momentum = num(value)?,
            "weight_decay" => self.weight_decay = num(value)?,
            "schedule" => self.schedule = named(value)?,
            "optimizer" => self.optimizer = named(value)?,
            "alpha_lr" => self.alpha_lr = opt_f64(value)?,
            "order" => self.order = named(value)?,
            "seed" => self.seed = num(value)?,
            "seeds" => {
                self.seeds = value
                    .split(',')
                    .map(|s| num(s.trim()))
                    .collect::<std::result::Result<_, _>>()?;
                if self.seeds.is_empty() {
                    return Err("empty seed list".into());
                }
            }
            "record_corr" => self.record_corr = num(value)?,
            "task" => self.task = named(value)?,
            "linear_share" => self.linear_share = num(value)?,
            "directions" => self.directions = num(value)?,
            "n_train" => self.n_train = num(value)?,
            "n_val" => self.n_val = num(value)?,
            "n_test" => self.n_test = num(value)?,
            "data_seed" => self.data_seed = num(value)?,
            _ => return Err(format!("unknown key `{key}`")),
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<String> {
        Some(match key {
            "space" => self.space.to_string(),
            "regime" => self.regime.to_string(),
            "activation" => self.activation.name().to_string(),
            "alpha_init" => show_opt(self.alpha_init),
            "epochs" => self.epochs.to_string(),
            "batch_size" => self.batch_size.to_string(),
            "lr" => self.lr.to_string(),
            "momentum" => self.momentum.to_string(),
            "weight_decay" => self.weight_decay.to_string(),
            "schedule" => self.schedule.to_string(),
            "optimizer" => self.optimizer.to_string(),
            "alpha_lr" => show_opt(self.alpha_lr),
            "order" => self.order.to_string(),
            "seed" => self.seed.to_string(),
            "seeds" => self
                .seeds
                .iter()
                .map(u64::to_string)
                .collect::<Vec<_>>()
                .join(","),
            "record_corr" => self.record_corr.to_string(),
            "task" => self.task.name().to_string(),
            "linear_share" => self.linear_share.to_string(),
            "directions" => self.directions.to_string(),
            "n_train" => self.n_train.to_string(),
            "n_val" => self.n_val.to_string(),
            "n_test" => self.n_test.to_string(),
            "data_seed" => self.data_seed.to_string(),
            _ => return None,
        })
    }

    /// Parses `text` over the defaults, then applies `overrides` in order.
    pub fn parse(text: &str, overrides: &[(String, String)]) -> Result<Self> {
        let mut cfg = RunConfig::default();
        let mut seen: BTreeMap<String, (usize, String)> = BTreeMap::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = idx + 1;
            let body = raw.split('#').next().unwrap_or("").trim();
            if body.is_empty() {
                continue;
            }
            let Some((k, v)) = body.split_once('=') else {
                return Err(Error::Config {
                    line,
                    message: format!("expected `key = value`, got `{body}`"),
                });
            };
            let (k, v) = (k.trim(), v.trim());
            if let Some((first, prev)) = seen.get(k) {
                if prev != v {
                    return Err(Error::Config {
                        line,
                        message: format!("`{k}` set to `{v}` here but to `{prev}` on line {first}"),
                    });
                }
                continue;
            }
            cfg.set(k, v).map_err(|message| Error::Config {
                line,
                message: format!("{k}: {message}"),
            })?;
            seen.insert(k.to_string(), (line, v.to_string()));
        }
        for (k, v) in overrides {
            cfg.set(k, v)
                .map_err(|m| Error::invalid(format!("override `{k}={v}`: {m}")))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads `path` (defaults only when `None`) and applies `overrides`.
    pub fn load(path: Option<&Path>, overrides: &[(String, String)]) -> Result<Self> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?,
            None => String::new(),
        };
        RunConfig::parse(&text, overrides)
    }

    /// One `key = value` line per key, in [`KEYS`] order.
    pub fn render(&self) -> String {
        KEYS.iter()
            .map(|k| format!("{k} = {}\n", self.get(k).expect("known key")))
            .collect()
    }

    pub fn net(&self) -> NetConfig {
        self.space.net()
    }

    pub fn dataset(&self) -> DatasetSpec {
        DatasetSpec {
            kind: self.task,
            n_train: self.n_train,
            n_val: self.n_val,
            n_test: self.n_test,
            seed: self.data_seed,
            linear_share: self.linear_share,
            directions: self.directions,
            ..DatasetSpec::default()
        }
    }

    pub fn alpha_optimizer(&self) -> OptimizerConfig {
        match self.optimizer {
            OptimizerKind::Adam => {
                OptimizerConfig::adam(self.alpha_lr.unwrap_or(3e-4), (0.5, 0.999), 0.0)
            }
            OptimizerKind::Sgd => OptimizerConfig::sgd(self.alpha_lr.unwrap_or(self.lr), 0.9, 0.0),
        }
    }

    /// Search settings for `seed`.
    pub fn search(&self, seed: u64) -> SearchConfig {
        SearchConfig {
            regime: self.regime,
            epochs: self.epochs,
            batch_size: self.batch_size,
            w_opt: OptimizerConfig::sgd(self.lr, self.momentum, self.weight_decay),
            alpha_opt: self.alpha_optimizer(),
            lr_schedule: self.schedule,
            activation: self.activation,
            alpha_init: self.alpha_init,
            order: self.order,
            seed,
            net: self.net(),
            record_corr: self.record_corr,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.search(self.seed).validate()?;
        self.dataset().validate()
    }
}

/// Splits `key=value` command-line overrides.
pub fn parse_override(s: &str) -> Result<(String, String)> {
    let (k, v) = s
        .split_once('=')
        .ok_or_else(|| Error::invalid(format!("override `{s}` is not key=value")))?;
    Ok((k.trim().to_string(), v.trim().to_string()))
}
