//! Search regimes over a relaxed supernet: first-order bi-level,
//! single-level on one batch, and the same-subset/different-batch ablation.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Gradients;
use crate::data::{split_for_bilevel, Split, Task};
use crate::diagnostics::{
    alpha_grad_from_p, tap_grad_p, CorrelationReport, EdgeSignals, Provenance, RunSummary,
    TraceRecord,
};
use crate::error::{Error, Result};
use crate::optim::{LrSchedule, OptimizerConfig, OptimizerState};
use crate::space::{
    derive_seed, discretize, Activation, AlphaSet, Architecture, Forward, NetConfig, Supernet,
};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    Bilevel,
    SingleLevel,
    SameSubsetDiffBatch,
}

impl Regime {
    pub const ALL: [Regime; 3] = [
        Regime::Bilevel,
        Regime::SameSubsetDiffBatch,
        Regime::SingleLevel,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Regime::Bilevel => "bilevel",
            Regime::SingleLevel => "single_level",
            Regime::SameSubsetDiffBatch => "same_subset_diff_batch",
        }
    }
}

impl FromStr for Regime {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Regime::ALL
            .into_iter()
            .find(|r| r.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown regime `{s}`")))
    }
}

impl fmt::Display for Regime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Order of the two updates in an alternating step.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UpdateOrder {
    AlphaFirst,
    WeightsFirst,
}

impl FromStr for UpdateOrder {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "alpha_first" => Ok(UpdateOrder::AlphaFirst),
            "weights_first" => Ok(UpdateOrder::WeightsFirst),
            _ => Err(Error::invalid(format!("unknown update order `{s}`"))),
        }
    }
}

impl fmt::Display for UpdateOrder {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            UpdateOrder::AlphaFirst => "alpha_first",
            UpdateOrder::WeightsFirst => "weights_first",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchConfig {
    pub regime: Regime,
    pub epochs: usize,
    pub batch_size: usize,
    pub w_opt: OptimizerConfig,
    pub alpha_opt: OptimizerConfig,
    /// Schedule of the weight learning rate; α always uses a constant rate.
    pub lr_schedule: LrSchedule,
    pub activation: Activation,
    /// `None` uses the activation's default.
    pub alpha_init: Option<f64>,
    pub order: UpdateOrder,
    pub seed: u64,
    pub net: NetConfig,
    /// Record the gradient correlation of the step's two batches per edge.
    pub record_corr: bool,
}

impl SearchConfig {
    /// w: SGD 0.005, momentum 0.9, decay 3e-4, cosine. α: Adam 3e-4,
    /// betas (0.5, 0.999), no decay. 50 epochs of batch 32.
    pub fn new(regime: Regime, net: NetConfig) -> Self {
        SearchConfig {
            regime,
            epochs: 50,
            batch_size: 32,
            w_opt: OptimizerConfig::sgd(0.005, 0.9, 3e-4),
            alpha_opt: OptimizerConfig::adam(3e-4, (0.5, 0.999), 0.0),
            lr_schedule: LrSchedule::Cosine,
            activation: Activation::Softmax,
            alpha_init: None,
            order: UpdateOrder::AlphaFirst,
            seed: 0,
            net,
            record_corr: false,
        }
    }

    pub fn desk(regime: Regime) -> Self {
        SearchConfig::new(regime, NetConfig::desk_nas201())
    }

    pub fn micro(regime: Regime) -> Self {
        SearchConfig::new(regime, NetConfig::micro())
    }

    pub fn alpha_init_value(&self) -> f64 {
        self.alpha_init
            .unwrap_or_else(|| self.activation.default_alpha_init())
    }

    pub fn validate(&self) -> Result<()> {
        self.net.validate()?;
        self.w_opt.validate()?;
        self.alpha_opt.validate()?;
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be positive"));
        }
        if !self.alpha_init_value().is_finite() {
            return Err(Error::invalid("alpha_init must be finite"));
        }
        Ok(())
    }
}

/// Sample ids that fed each kind of update during a run.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SampleAudit {
    pub w_ids: BTreeSet<usize>,
    pub alpha_ids: BTreeSet<usize>,
}

impl SampleAudit {
    pub fn overlap(&self) -> usize {
        self.w_ids.intersection(&self.alpha_ids).count()
    }
}

#[derive(Clone, Debug)]
pub struct SearchResult {
    pub config: SearchConfig,
    pub final_alphas: AlphaSet,
    pub architecture: Architecture,
    pub trace: Vec<TraceRecord>,
    pub steps: usize,
    pub audit: SampleAudit,
    pub net: Supernet,
}

impl SearchResult {
    pub fn summary(&self, correlation: Option<CorrelationReport>) -> RunSummary {
        let rows = |t: &Tensor| -> Vec<Vec<f64>> {
            let k = t.shape()[1];
            t.data().chunks(k).map(<[f64]>::to_vec).collect()
        };
        RunSummary {
            regime: self.config.regime.name().to_string(),
            seed: self.config.seed,
            steps: self.steps,
            activation: self.final_alphas.activation,
            final_alpha: rows(&self.final_alphas.alpha),
            final_p: rows(&self.final_alphas.probabilities()),
            architecture: self.architecture.label(&self.config.net.spec),
            final_loss_train: self.trace.last().map(|r| r.loss_train),
            correlation,
        }
    }
}

/// A run that stopped on an error; `partial` holds everything up to the
/// failing step.
#[derive(Debug)]
pub struct SearchAbort {
    pub error: Error,
    pub partial: Option<Box<SearchResult>>,
}

impl fmt::Display for SearchAbort {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.partial {
            Some(p) => write!(f, "search aborted after {} steps: {}", p.steps, self.error),
            None => write!(f, "search not started: {}", self.error),
        }
    }
}

impl std::error::Error for SearchAbort {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        Some(&self.error)
    }
}

impl From<SearchAbort> for Error {
    fn from(a: SearchAbort) -> Error {
        a.error
    }
}

/// One labelled minibatch with the stream ids of its rows.
#[derive(Clone, Debug)]
pub struct Batch {
    pub x: Tensor,
    pub y: Vec<usize>,
    pub ids: Vec<usize>,
}

impl Batch {
    pub fn from_split(split: &Split, rows: &[usize]) -> Self {
        let (x, y) = split.batch(rows);
        Batch {
            x,
            y,
            ids: rows.iter().map(|&r| split.ids[r]).collect(),
        }
    }
}

struct Pass {
    fwd: Forward,
    grads: Gradients,
}

impl Pass {
    fn loss(&self) -> f64 {
        self.fwd.loss_value().expect("labels given")
    }

    fn weight_grads(&self, net: &Supernet) -> Vec<Tensor> {
        self.fwd
            .weight_vars
            .iter()
            .zip(net.weights())
            .map(|(&v, w)| self.grads.get_or_zeros(v, w))
            .collect()
    }

    fn alpha_grad(&self, like: &Tensor) -> Tensor {
        self.grads
            .get_or_zeros(self.fwd.alpha.expect("relaxed network"), like)
    }
}

/// Supernet plus the two optimizer states; drives single steps.
pub struct Searcher {
    pub net: Supernet,
    pub cfg: SearchConfig,
    w_state: OptimizerState,
    a_state: OptimizerState,
    step: usize,
}

impl Searcher {
    pub fn new(cfg: SearchConfig) -> Result<Self> {
        cfg.validate()?;
        let net = Supernet::with_alpha_init(
            cfg.net.clone(),
            cfg.activation,
            cfg.alpha_init_value(),
            cfg.seed,
        )?;
        Searcher::with_net(cfg, net)
    }

    /// Starts from an existing relaxed network.
    pub fn with_net(cfg: SearchConfig, net: Supernet) -> Result<Self> {
        cfg.validate()?;
        if net.alphas().is_none() {
            return Err(Error::invalid("search needs a relaxed supernet"));
        }
        Ok(Searcher {
            w_state: OptimizerState::new(cfg.w_opt),
            a_state: OptimizerState::new(cfg.alpha_opt),
            net,
            cfg,
            step: 0,
        })
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }

    fn pass(&self, b: &Batch) -> Result<Pass> {
        let fwd = self.net.forward(&b.x, Some(&b.y))?;
        let grads = fwd.graph.backward(fwd.loss.expect("labels given"))?;
        Ok(Pass { fwd, grads })
    }

    fn update_alpha(&mut self, grad: Tensor) -> Result<()> {
        let step = self.step;
        let lr = self.cfg.alpha_opt.lr;
        let a = self.net.alphas_mut().expect("relaxed network");
        self.a_state.step(&mut [&mut a.alpha], &[grad], lr, step)?;
        check_alphas(a, step)
    }

    fn update_weights(&mut self, grads: Vec<Tensor>, w_lr: f64) -> Result<()> {
        let step = self.step;
        let mut params = self.net.weights_mut();
        self.w_state.step(&mut params, &grads, w_lr, step)
    }

    /// Trace rows from the α-gradient pass (at that pass's probabilities),
    /// with the per-step check that
    /// the per-cell chain-rule terms add up to the autodiff α-gradient.
    fn records(
        &self,
        a_pass: &Pass,
        epoch: usize,
        loss_train: f64,
        loss_val: Option<f64>,
        corr: Option<&[f64]>,
        provenance: Provenance,
    ) -> Result<Vec<TraceRecord>> {
        let activation = self.net.alphas().expect("relaxed network").activation;
        let p = a_pass.fwd.graph.value(a_pass.fwd.probs.expect("relaxed network"));
        let spec = &self.net.config.spec;
        let (e_count, k_count) = (spec.num_edges(), spec.num_ops());
        let mut total = Tensor::zeros(p.shape());
        let mut out = Vec::with_capacity(self.net.config.num_cells * e_count * k_count);
        for c in 0..self.net.config.num_cells {
            for e in 0..e_count {
                let tap = c * e_count + e;
                let gp = tap_grad_p(&a_pass.fwd, &a_pass.grads, tap)?;
                let ga = alpha_grad_from_p(p.row(e), &gp, activation);
                for k in 0..k_count {
                    total.data_mut()[e * k_count + k] += ga[k];
                    out.push(TraceRecord {
                        step: self.step,
                        epoch,
                        cell: c,
                        edge: e,
                        op_name: spec.ops[k],
                        p: p.row(e)[k],
                        grad_p: gp[k],
                        grad_alpha: ga[k],
                        loss_train,
                        loss_val,
                        corr: corr.map(|v| v[tap]),
                        provenance,
                    });
                }
            }
        }
        let autodiff = a_pass.alpha_grad(p);
        for (i, (a, b)) in total.data().iter().zip(autodiff.data()).enumerate() {
            if (a - b).abs() > 1e-10 * b.abs().max(1.0) {
                return Err(Error::Step {
                    step: self.step,
                    message: format!(
                        "chain-rule α-gradient {a} disagrees with autodiff {b} at entry {i}"
                    ),
                });
            }
        }
        Ok(out)
    }

    /// α and w from one backward pass of one batch, updated together.
    pub fn single_level_step(
        &mut self,
        batch: &Batch,
        epoch: usize,
        w_lr: f64,
    ) -> Result<Vec<TraceRecord>> {
        let pass = self.pass(batch)?;
        let loss = pass.loss();
        let corr = if self.cfg.record_corr {
            let s = EdgeSignals::capture(&pass.fwd, &pass.grads);
            Some(s.correlation(&s)?)
        } else {
            None
        };
        let rows = self.records(&pass, epoch, loss, None, corr.as_deref(), Provenance::Train)?;
        let alpha = self.net.alphas().expect("relaxed network").alpha.clone();
        let ga = pass.alpha_grad(&alpha);
        let gw = pass.weight_grads(&self.net);
        drop(pass);
        self.update_alpha(ga)?;
        self.update_weights(gw, w_lr)?;
        self.step += 1;
        Ok(rows)
    }

    /// α from `alpha_batch`, w from `w_batch`, one after the other in the
    /// configured order. The α-gradient pass is the one recorded.
    pub fn alternating_step(
        &mut self,
        w_batch: &Batch,
        alpha_batch: &Batch,
        epoch: usize,
        w_lr: f64,
        provenance: Provenance,
    ) -> Result<Vec<TraceRecord>> {
        let snap_a = self.pass(alpha_batch)?;
        let snap_w = if self.cfg.record_corr || self.cfg.order == UpdateOrder::WeightsFirst {
            Some(self.pass(w_batch)?)
        } else {
            None
        };
        let corr = match (&snap_w, self.cfg.record_corr) {
            (Some(w), true) => {
                let a = EdgeSignals::capture(&snap_a.fwd, &snap_a.grads);
                let b = EdgeSignals::capture(&w.fwd, &w.grads);
                Some(a.correlation(&b)?)
            }
            _ => None,
        };
        let loss_alpha = snap_a.loss();
        let loss_val = (provenance == Provenance::Val).then_some(loss_alpha);
        let alpha_like = self.net.alphas().expect("relaxed network").alpha.clone();
        match self.cfg.order {
            UpdateOrder::AlphaFirst => {
                let ga = snap_a.alpha_grad(&alpha_like);
                self.update_alpha(ga)?;
                let w_pass = self.pass(w_batch)?;
                let loss_train = w_pass.loss();
                let rows = self.records(&snap_a, epoch, loss_train, loss_val, corr.as_deref(), provenance)?;
                let gw = w_pass.weight_grads(&self.net);
                self.update_weights(gw, w_lr)?;
                self.step += 1;
                Ok(rows)
            }
            UpdateOrder::WeightsFirst => {
                let w_pass = snap_w.expect("evaluated for weights-first");
                let loss_train = w_pass.loss();
                let gw = w_pass.weight_grads(&self.net);
                self.update_weights(gw, w_lr)?;
                let a_pass = self.pass(alpha_batch)?;
                let loss_val = (provenance == Provenance::Val).then(|| a_pass.loss());
                let rows = self.records(&a_pass, epoch, loss_train, loss_val, corr.as_deref(), provenance)?;
                let ga = a_pass.alpha_grad(&alpha_like);
                self.update_alpha(ga)?;
                self.step += 1;
                Ok(rows)
            }
        }
    }
}

fn check_alphas(a: &AlphaSet, step: usize) -> Result<()> {
    if !a.alpha.is_finite() {
        return Err(Error::Step {
            step,
            message: "non-finite α after update".into(),
        });
    }
    if a.activation == Activation::Softmax {
        let p = a.probabilities();
        for (e, row) in p.data().chunks(a.num_ops()).enumerate() {
            let s: f64 = row.iter().sum();
            if (s - 1.0).abs() > 1e-9 {
                return Err(Error::Step {
                    step,
                    message: format!("softmax row {e} sums to {s}"),
                });
            }
        }
    }
    Ok(())
}

fn shuffled(n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut v: Vec<usize> = (0..n).collect();
    v.shuffle(rng);
    v
}

fn batches(order: &[usize], size: usize) -> Vec<&[usize]> {
    if order.len() < size {
        return vec![order];
    }
    order.chunks_exact(size).collect()
}

/// Runs `cfg.epochs` epochs of the configured regime on `task`'s training
/// split. Bi-level halves the training split (weights / architecture);
/// the other regimes use all of it.
pub fn run_search(cfg: &SearchConfig, task: &Task) -> std::result::Result<SearchResult, SearchAbort> {
    let not_started = |error| SearchAbort {
        error,
        partial: None,
    };
    if task.spec.input_dim != cfg.net.input_dim || task.spec.classes != cfg.net.classes {
        return Err(not_started(Error::invalid(format!(
            "task is {}-dim/{} classes, network expects {}/{}",
            task.spec.input_dim, task.spec.classes, cfg.net.input_dim, cfg.net.classes
        ))));
    }
    let mut s = Searcher::new(cfg.clone()).map_err(not_started)?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[300]));
    let halves = (cfg.regime == Regime::Bilevel).then(|| split_for_bilevel(&task.train, cfg.seed));
    if let Some(h) = &halves {
        let w: BTreeSet<usize> = h.weights.ids.iter().copied().collect();
        if h.alpha.ids.iter().any(|i| w.contains(i)) {
            return Err(not_started(Error::invalid("bi-level splits overlap")));
        }
    }
    if cfg.regime == Regime::SameSubsetDiffBatch && task.train.len() < 2 * cfg.batch_size {
        return Err(not_started(Error::invalid(
            "same_subset_diff_batch needs at least two batches",
        )));
    }

    let mut trace = Vec::new();
    let mut audit = SampleAudit::default();
    let mut outcome = Ok(());
    'epochs: for epoch in 0..cfg.epochs {
        let w_lr = cfg.lr_schedule.lr(cfg.w_opt.lr, epoch, cfg.epochs);
        let mut plan: Vec<(Batch, Option<Batch>)> = Vec::new();
        match (&halves, cfg.regime) {
            (Some(h), _) => {
                let ow = shuffled(h.weights.len(), &mut rng);
                let oa = shuffled(h.alpha.len(), &mut rng);
                for (bw, ba) in batches(&ow, cfg.batch_size)
                    .into_iter()
                    .zip(batches(&oa, cfg.batch_size))
                {
                    plan.push((
                        Batch::from_split(&h.weights, bw),
                        Some(Batch::from_split(&h.alpha, ba)),
                    ));
                }
            }
            (None, Regime::SingleLevel) => {
                let o = shuffled(task.train.len(), &mut rng);
                for b in batches(&o, cfg.batch_size) {
                    plan.push((Batch::from_split(&task.train, b), None));
                }
            }
            (None, _) => {
                let o = shuffled(task.train.len(), &mut rng);
                let bs = batches(&o, cfg.batch_size);
                for (i, b) in bs.iter().enumerate() {
                    let next = bs[(i + 1) % bs.len()];
                    plan.push((
                        Batch::from_split(&task.train, b),
                        Some(Batch::from_split(&task.train, next)),
                    ));
                }
            }
        }
        for (wb, ab) in &plan {
            let rows = match ab {
                None => s.single_level_step(wb, epoch, w_lr),
                Some(ab) => {
                    let prov = if halves.is_some() {
                        Provenance::Val
                    } else {
                        Provenance::Train
                    };
                    s.alternating_step(wb, ab, epoch, w_lr, prov)
                }
            };
            match rows {
                Ok(r) => {
                    trace.extend(r);
                    audit.w_ids.extend(wb.ids.iter().copied());
                    audit
                        .alpha_ids
                        .extend(ab.as_ref().unwrap_or(wb).ids.iter().copied());
                }
                Err(e @ Error::Step { .. }) => {
                    outcome = Err(e);
                    break 'epochs;
                }
                Err(e) => {
                    outcome = Err(Error::Step {
                        step: s.steps_taken(),
                        message: e.to_string(),
                    });
                    break 'epochs;
                }
            }
        }
    }

    let final_alphas = s.net.alphas().expect("relaxed network").clone();
    let result = SearchResult {
        architecture: discretize(&final_alphas, &cfg.net.spec),
        final_alphas,
        trace,
        steps: s.steps_taken(),
        audit,
        config: cfg.clone(),
        net: s.net,
    };
    match outcome {
        Ok(()) => Ok(result),
        Err(error) => Err(SearchAbort {
            error,
            partial: Some(Box::new(result)),
        }),
    }
}
