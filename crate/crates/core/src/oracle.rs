//! Exhaustive ground truth for small search spaces: train every
//! architecture from scratch and rank by validation accuracy.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{Split, Task};
use crate::diagnostics::{read_json, write_json};
use crate::error::{Error, Result};
use crate::optim::{LrSchedule, OptimizerConfig, OptimizerState};
use crate::space::{derive_seed, Architecture, CellSpec, NetConfig, Supernet};

/// Refuse spaces larger than this unless explicitly allowed.
pub const ENUMERATION_GUARD: usize = 1000;

/// Every `ops^edges` architecture, lexicographic in op index with edge 0
/// most significant.
pub fn enumerate_architectures(spec: &CellSpec) -> Vec<Architecture> {
    let (e, k) = (spec.num_edges(), spec.num_ops());
    let total = k.checked_pow(e as u32).expect("space size fits in usize");
    (0..total)
        .map(|mut i| {
            let mut ops = vec![spec.ops[0]; e];
            for slot in ops.iter_mut().rev() {
                *slot = spec.ops[i % k];
                i /= k;
            }
            Architecture::new(ops)
        })
        .collect()
}

pub fn space_size(spec: &CellSpec) -> Option<usize> {
    spec.num_ops().checked_pow(spec.num_edges() as u32)
}

/// Training recipe for one stand-alone network.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainBudget {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerConfig,
    pub schedule: LrSchedule,
}

impl Default for TrainBudget {
    /// 30 epochs, batch 32, SGD lr 0.01 momentum 0.9, no decay.
    fn default() -> Self {
        TrainBudget {
            epochs: 30,
            batch_size: 32,
            optimizer: OptimizerConfig::sgd(0.01, 0.9, 0.0),
            schedule: LrSchedule::Constant,
        }
    }
}

/// Trains every weight of `net` (α, if any, stays fixed) on `split`.
/// Returns the mean training loss of the last epoch.
pub fn train_weights(net: &mut Supernet, split: &Split, budget: &TrainBudget, seed: u64) -> Result<f64> {
    budget.optimizer.validate()?;
    if budget.batch_size == 0 || split.is_empty() {
        return Err(Error::invalid("training needs a positive batch size and data"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[500]));
    let mut state = OptimizerState::new(budget.optimizer);
    let mut order: Vec<usize> = (0..split.len()).collect();
    let mut last = f64::NAN;
    let mut step = 0;
    for epoch in 0..budget.epochs {
        let lr = budget.schedule.lr(budget.optimizer.lr, epoch, budget.epochs);
        order.shuffle(&mut rng);
        let (mut sum, mut count) = (0.0, 0usize);
        for rows in order.chunks(budget.batch_size) {
            if rows.len() < budget.batch_size && count > 0 {
                break;
            }
            let (x, y) = split.batch(rows);
            let fwd = net.forward(&x, Some(&y))?;
            let loss = fwd.loss.expect("labels given");
            let grads = fwd.graph.backward(loss)?;
            let g: Vec<_> = fwd
                .weight_vars
                .iter()
                .zip(net.weights())
                .map(|(&v, w)| grads.get_or_zeros(v, w))
                .collect();
            sum += fwd.loss_value().expect("labels given");
            count += 1;
            state.step(&mut net.weights_mut(), &g, lr, step)?;
            step += 1;
        }
        last = sum / count as f64;
    }
    Ok(last)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleRun {
    pub seed: u64,
    pub val_accuracy: f64,
    pub train_loss: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleEntry {
    /// Position in [`enumerate_architectures`] order.
    pub index: usize,
    pub architecture: Architecture,
    pub mean_val_accuracy: f64,
    pub runs: Vec<OracleRun>,
}

/// One entry per architecture, keyed by its label.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleTable {
    pub task_fingerprint: String,
    pub net: NetConfig,
    pub budget: TrainBudget,
    pub seeds: Vec<u64>,
    pub entries: BTreeMap<String, OracleEntry>,
}

impl OracleTable {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entry(&self, arch: &Architecture) -> Result<&OracleEntry> {
        self.entries
            .get(&arch.label(&self.net.spec))
            .ok_or_else(|| Error::invalid(format!("{} is not in the oracle table", arch.label(&self.net.spec))))
    }

    /// Entries in enumeration order.
    pub fn ordered(&self) -> Vec<&OracleEntry> {
        let mut v: Vec<&OracleEntry> = self.entries.values().collect();
        v.sort_by_key(|e| e.index);
        v
    }

    /// 1-based rank by mean validation accuracy (ties share the smallest
    /// rank) and `rank / len`.
    pub fn rank_of(&self, arch: &Architecture) -> Result<(usize, f64)> {
        let acc = self.entry(arch)?.mean_val_accuracy;
        let better = self
            .entries
            .values()
            .filter(|e| e.mean_val_accuracy > acc)
            .count();
        let rank = better + 1;
        Ok((rank, rank as f64 / self.len() as f64))
    }

    /// Highest mean accuracy; ties go to the lowest enumeration index.
    pub fn best(&self) -> &OracleEntry {
        let mut best: Option<&OracleEntry> = None;
        for e in self.ordered() {
            if best.is_none_or(|b| e.mean_val_accuracy > b.mean_val_accuracy) {
                best = Some(e);
            }
        }
        best.expect("non-empty table")
    }

    /// Best entry among architectures without any learnable operation.
    pub fn best_non_learnable(&self) -> Option<&OracleEntry> {
        let mut best: Option<&OracleEntry> = None;
        for e in self.ordered() {
            if e.architecture.ops.iter().any(|k| k.is_learnable()) {
                continue;
            }
            if best.is_none_or(|b| e.mean_val_accuracy > b.mean_val_accuracy) {
                best = Some(e);
            }
        }
        best
    }

    /// Task-design check: the best architecture routes the input through a
    /// learnable op and beats every purely non-learnable architecture.
    pub fn learnability_check(&self) -> bool {
        let best = self.best();
        let routed = learnable_on_active_path(&best.architecture, &self.net.spec);
        let margin = self
            .best_non_learnable()
            .is_none_or(|b| b.mean_val_accuracy < best.mean_val_accuracy);
        routed && margin
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_json(self, path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        read_json(path)
    }
}

/// True when some edge with a learnable op lies on an input → output path
/// made only of non-zero ops.
pub fn learnable_on_active_path(arch: &Architecture, spec: &CellSpec) -> bool {
    let n = spec.num_nodes;
    let live = |e: usize| arch.ops[e] != crate::ops::OpKind::Zero;
    let mut from_input = vec![false; n];
    from_input[0] = true;
    for (e, &(i, j)) in spec.edges.iter().enumerate() {
        if live(e) && from_input[i] {
            from_input[j] = true;
        }
    }
    let mut to_output = vec![false; n];
    to_output[n - 1] = true;
    for (e, &(i, j)) in spec.edges.iter().enumerate().rev() {
        if live(e) && to_output[j] {
            to_output[i] = true;
        }
    }
    spec.edges
        .iter()
        .enumerate()
        .any(|(e, &(i, j))| arch.ops[e].is_learnable() && from_input[i] && to_output[j])
}

/// Options of [`evaluate_all`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleConfig {
    pub net: NetConfig,
    pub budget: TrainBudget,
    pub seeds: Vec<u64>,
    pub allow_large: bool,
}

impl OracleConfig {
    /// Micro space, default budget, seeds 0..3.
    pub fn micro() -> Self {
        OracleConfig {
            net: NetConfig::micro(),
            budget: TrainBudget::default(),
            seeds: vec![0, 1, 2],
            allow_large: false,
        }
    }

    /// Content address of a table built from `task` with these options.
    pub fn fingerprint(&self, task: &Task) -> String {
        let canon = serde_json::to_string(&(&self.net, &self.budget, &self.seeds))
            .expect("config serializes");
        let digest = Sha256::digest(format!("oracle-v1:{}:{canon}", task.fingerprint()).as_bytes());
        hex::encode(digest)
    }
}

/// Trains `arch` for every seed; returns the runs in seed order.
pub fn evaluate_architecture(
    arch: &Architecture,
    task: &Task,
    cfg: &OracleConfig,
) -> Result<Vec<OracleRun>> {
    cfg.seeds
        .iter()
        .map(|&seed| {
            let mut net = Supernet::instantiate(cfg.net.clone(), arch, seed)?;
            let train_loss = train_weights(&mut net, &task.train, &cfg.budget, seed)?;
            let val_accuracy = net.accuracy(&task.val.x, &task.val.y)?;
            Ok(OracleRun {
                seed,
                val_accuracy,
                train_loss,
            })
        })
        .collect()
}

/// Trains every architecture of the space on `task.train` and scores it on
/// `task.val`. Runs in parallel; the result does not depend on scheduling.
pub fn evaluate_all(task: &Task, cfg: &OracleConfig) -> Result<OracleTable> {
    cfg.net.validate()?;
    if cfg.seeds.is_empty() {
        return Err(Error::invalid("oracle needs at least one seed"));
    }
    let size = space_size(&cfg.net.spec).unwrap_or(usize::MAX);
    if size > ENUMERATION_GUARD && !cfg.allow_large {
        return Err(Error::invalid(format!(
            "space has {size} architectures (guard {ENUMERATION_GUARD}); set allow_large to proceed"
        )));
    }
    let archs = enumerate_architectures(&cfg.net.spec);
    let runs: Vec<Result<Vec<OracleRun>>> = archs
        .par_iter()
        .map(|a| evaluate_architecture(a, task, cfg))
        .collect();
    let mut entries = BTreeMap::new();
    for (index, (architecture, runs)) in archs.into_iter().zip(runs).enumerate() {
        let runs = runs?;
        let mean_val_accuracy =
            runs.iter().map(|r| r.val_accuracy).sum::<f64>() / runs.len() as f64;
        entries.insert(
            architecture.label(&cfg.net.spec),
            OracleEntry {
                index,
                architecture,
                mean_val_accuracy,
                runs,
            },
        );
    }
    Ok(OracleTable {
        task_fingerprint: task.fingerprint(),
        net: cfg.net.clone(),
        budget: cfg.budget,
        seeds: cfg.seeds.clone(),
        entries,
    })
}

/// Reads `dir/oracle-<fingerprint>.json` when present, otherwise evaluates
/// and stores it.
pub fn load_or_evaluate(task: &Task, cfg: &OracleConfig, dir: &Path) -> Result<OracleTable> {
    let path = dir.join(format!("oracle-{}.json", cfg.fingerprint(task)));
    if path.exists() {
        let table = OracleTable::load(&path)?;
        if table.task_fingerprint == task.fingerprint() {
            return Ok(table);
        }
    }
    let table = evaluate_all(task, cfg)?;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    table.save(&path)?;
    Ok(table)
}
