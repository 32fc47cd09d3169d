//! Numeric checks of the mixing-weight claims on the identity model
//! `L = -yᵀ ln softmax(Σ_k p_k x_k)`.
//!
//! Three claims are exercised:
//! * loss order: an op whose own logits fit `y` better gets the smaller
//!   `∂L/∂p`, approximately, when all `softmax(x_k)` are close
//!   ([`check_loss_order`]);
//! * gap expansion: under softmax, `s_j < s_i` and `α_j ≥ α_i` give
//!   `∂L/∂α_j ≤ ∂L/∂α_i` ([`check_gap_expansion`]);
//! * collapse speed: with fixed scores and margin `δ`, descent reaches
//!   `p_{i*} > 1 − ε` within `n ln((1−ε)n) / (ηδ)` steps ([`collapse_bound`],
//!   [`simulate_dynamics`]).

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::Graph;
use crate::error::{Error, Result};
use crate::space::{derive_seed, Activation};
use crate::tensor::Tensor;

fn softmax(z: &[f64]) -> Vec<f64> {
    let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - max).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// `-ln softmax(z)[label]`.
fn cross_entropy(z: &[f64], label: usize) -> f64 {
    let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    lse - z[label]
}

fn kl(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .filter(|(a, _)| **a > 0.0)
        .map(|(a, b)| a * (a / b).ln())
        .sum()
}

/// Mixing probabilities of `α` under `activation`.
pub fn activate(alpha: &[f64], activation: Activation) -> Vec<f64> {
    match activation {
        Activation::Softmax => softmax(alpha),
        Activation::Sigmoid => alpha.iter().map(|&a| sigmoid(a)).collect(),
    }
}

/// `∂L/∂α` from `∂L/∂p` through the activation.
pub fn alpha_gradient(p: &[f64], grad_p: &[f64], activation: Activation) -> Vec<f64> {
    match activation {
        Activation::Softmax => {
            let mean = dot(p, grad_p);
            p.iter().zip(grad_p).map(|(pi, gi)| pi * (gi - mean)).collect()
        }
        Activation::Sigmoid => p
            .iter()
            .zip(grad_p)
            .map(|(pi, gi)| pi * (1.0 - pi) * gi)
            .collect(),
    }
}

/// One identity-model instance: op outputs `x[k]` (logit vectors), a label,
/// architecture parameters and a step size.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimplifiedInstance {
    pub x: Vec<Vec<f64>>,
    pub label: usize,
    pub alpha: Vec<f64>,
    pub activation: Activation,
    pub eta: f64,
}

impl SimplifiedInstance {
    pub fn new(
        x: Vec<Vec<f64>>,
        label: usize,
        alpha: Vec<f64>,
        activation: Activation,
        eta: f64,
    ) -> Result<Self> {
        let c = x.first().map_or(0, Vec::len);
        if x.is_empty() || c < 2 || x.iter().any(|r| r.len() != c) {
            return Err(Error::invalid("need at least one op and ≥ 2 classes, all of one width"));
        }
        if alpha.len() != x.len() {
            return Err(Error::invalid(format!(
                "{} α entries for {} ops",
                alpha.len(),
                x.len()
            )));
        }
        if label >= c {
            return Err(Error::invalid(format!("label {label} out of range for {c} classes")));
        }
        Ok(SimplifiedInstance {
            x,
            label,
            alpha,
            activation,
            eta,
        })
    }

    pub fn n_ops(&self) -> usize {
        self.x.len()
    }

    pub fn class_dim(&self) -> usize {
        self.x[0].len()
    }

    pub fn y(&self) -> Vec<f64> {
        let mut y = vec![0.0; self.class_dim()];
        y[self.label] = 1.0;
        y
    }

    pub fn probs(&self) -> Vec<f64> {
        activate(&self.alpha, self.activation)
    }

    pub fn xbar(&self) -> Vec<f64> {
        let p = self.probs();
        let mut out = vec![0.0; self.class_dim()];
        for (pk, xk) in p.iter().zip(&self.x) {
            for (o, v) in out.iter_mut().zip(xk) {
                *o += pk * v;
            }
        }
        out
    }

    pub fn loss(&self) -> f64 {
        cross_entropy(&self.xbar(), self.label)
    }

    /// Loss when op `k` alone produced the logits.
    pub fn op_loss(&self, k: usize) -> f64 {
        cross_entropy(&self.x[k], self.label)
    }

    /// `∂L/∂x̄ = softmax(x̄) − y`.
    pub fn dl_dxbar(&self) -> Vec<f64> {
        let mut t = softmax(&self.xbar());
        t[self.label] -= 1.0;
        t
    }

    /// `s_k = ∂L/∂x̄ᵀ x_k`, which is also `∂L/∂p_k`.
    pub fn scores(&self) -> Vec<f64> {
        let g = self.dl_dxbar();
        self.x.iter().map(|xk| dot(&g, xk)).collect()
    }

    pub fn grad_alpha(&self) -> Vec<f64> {
        alpha_gradient(&self.probs(), &self.scores(), self.activation)
    }

    /// `∂L/∂p` through the autodiff tape, with `p` fed as a free input.
    pub fn autodiff_grad_p(&self) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let p = g.param(Tensor::vector(self.probs()))?;
        let terms = self
            .x
            .iter()
            .map(|xk| g.constant(Tensor::vector(xk.clone())))
            .collect::<Result<Vec<_>>>()?;
        let xbar = g.weighted_sum(&terms, p)?;
        let loss = g.cross_entropy(xbar, &Tensor::vector(self.y()))?;
        let grads = g.backward(loss)?;
        Ok(grads
            .get(p)
            .map(|t| t.data().to_vec())
            .unwrap_or_else(|| vec![0.0; self.n_ops()]))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossOrderConfig {
    pub n_ops: usize,
    pub trials: usize,
    /// Shifts `c_k` are drawn from `[-shift, shift]`.
    pub shift: f64,
}

impl Default for LossOrderConfig {
    fn default() -> Self {
        LossOrderConfig {
            n_ops: 4,
            trials: 1000,
            shift: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossOrderReport {
    pub perturb_scale: f64,
    pub trials: usize,
    pub pairs: usize,
    /// Pairs whose excess `∂L/∂p_i − ∂L/∂p_j` exceeded the tolerance.
    pub violations: usize,
    pub violation_rate: f64,
    /// Largest excess over all ordered pairs, tolerance ignored (≥ 0).
    pub max_violation: f64,
    /// `max_violation / perturb_scale`; absent at scale 0.
    pub fitted_constant: Option<f64>,
    pub mean_kl: f64,
    /// Largest gap between the closed-form `∂L/∂p` and the tape.
    pub grad_formula_max_err: f64,
}

impl LossOrderReport {
    pub fn passed(&self) -> bool {
        self.violations == 0
    }
}

/// Tolerance on `∂L/∂p_i − ∂L/∂p_j` at `perturb_scale`: `10·scale·max‖x_k‖`
/// plus a rounding floor of `1e-12·max‖x_k‖`.
pub fn loss_order_tolerance(perturb_scale: f64, max_norm: f64) -> f64 {
    (10.0 * perturb_scale + 1e-12) * max_norm
}

/// Builds `x_k = base + c_k·1 + ε_k` with `ε_k ~ N(0, scale²)` and checks,
/// for every ordered pair with `loss(x_i) ≤ loss(x_j)`, that
/// `∂L/∂p_i ≤ ∂L/∂p_j + tol`. Mixing weights and labels are random per trial.
pub fn check_loss_order(
    base: &[f64],
    perturb_scale: f64,
    cfg: LossOrderConfig,
    seed: u64,
) -> Result<LossOrderReport> {
    if !(perturb_scale >= 0.0) || !perturb_scale.is_finite() {
        return Err(Error::invalid("perturb_scale must be ≥ 0"));
    }
    if base.len() < 2 || cfg.n_ops < 2 || cfg.trials == 0 {
        return Err(Error::invalid("need ≥ 2 classes, ≥ 2 ops and ≥ 1 trial"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[700]));
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let (mut pairs, mut violations) = (0, 0);
    let (mut max_violation, mut kl_sum, mut grad_err) = (0.0f64, 0.0, 0.0f64);
    for trial in 0..cfg.trials {
        let x: Vec<Vec<f64>> = (0..cfg.n_ops)
            .map(|_| {
                let c = rng.random_range(-cfg.shift..=cfg.shift);
                base.iter()
                    .map(|b| b + c + perturb_scale * normal.sample(&mut rng))
                    .collect()
            })
            .collect();
        let alpha: Vec<f64> = (0..cfg.n_ops).map(|_| normal.sample(&mut rng)).collect();
        let label = rng.random_range(0..base.len());
        let inst = SimplifiedInstance::new(x, label, alpha, Activation::Softmax, 0.0)?;
        let s = inst.scores();
        if trial < 10 {
            let tape = inst.autodiff_grad_p()?;
            for (a, b) in s.iter().zip(&tape) {
                grad_err = grad_err.max((a - b).abs());
            }
        }
        let t = softmax(&inst.xbar());
        kl_sum += inst
            .x
            .iter()
            .map(|xk| kl(&t, &softmax(xk)))
            .sum::<f64>()
            / cfg.n_ops as f64;
        let losses: Vec<f64> = (0..cfg.n_ops).map(|k| inst.op_loss(k)).collect();
        let max_norm = inst.x.iter().map(|v| norm(v)).fold(0.0, f64::max);
        let tol = loss_order_tolerance(perturb_scale, max_norm);
        for i in 0..cfg.n_ops {
            for j in 0..cfg.n_ops {
                if i == j || losses[i] > losses[j] {
                    continue;
                }
                pairs += 1;
                let excess = s[i] - s[j];
                max_violation = max_violation.max(excess);
                if excess > tol {
                    violations += 1;
                }
            }
        }
    }
    Ok(LossOrderReport {
        perturb_scale,
        trials: cfg.trials,
        pairs,
        violations,
        violation_rate: if pairs == 0 {
            0.0
        } else {
            violations as f64 / pairs as f64
        },
        max_violation,
        fitted_constant: (perturb_scale > 0.0).then(|| max_violation / perturb_scale),
        mean_kl: kl_sum / cfg.trials as f64,
        grad_formula_max_err: grad_err,
    })
}

/// Violation magnitude across perturbation scales with a log-log fit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossOrderScaling {
    pub reports: Vec<LossOrderReport>,
    /// Least-squares slope of `ln max_violation` on `ln scale` over the
    /// scales with a positive magnitude; `None` with fewer than two.
    pub slope: Option<f64>,
    pub min_slope: f64,
}

impl LossOrderScaling {
    /// Shrinks at least linearly: fitted slope ≥ `min_slope`, and once the
    /// magnitude hits 0 it stays there.
    pub fn passed(&self) -> bool {
        let mags: Vec<f64> = self.reports.iter().map(|r| r.max_violation).collect();
        let zero_tail = mags
            .iter()
            .position(|&m| m == 0.0)
            .is_none_or(|z| mags[z..].iter().all(|&m| m == 0.0));
        zero_tail && self.slope.is_none_or(|s| s >= self.min_slope)
    }
}

pub const LOSS_ORDER_SCALES: [f64; 4] = [1e-1, 1e-2, 1e-3, 1e-4];

pub fn loss_order_scaling(
    base: &[f64],
    scales: &[f64],
    cfg: LossOrderConfig,
    seed: u64,
) -> Result<LossOrderScaling> {
    let reports = scales
        .iter()
        .map(|&s| check_loss_order(base, s, cfg, seed))
        .collect::<Result<Vec<_>>>()?;
    let pts: Vec<(f64, f64)> = reports
        .iter()
        .filter(|r| r.max_violation > 0.0 && r.perturb_scale > 0.0)
        .map(|r| (r.perturb_scale.ln(), r.max_violation.ln()))
        .collect();
    Ok(LossOrderScaling {
        slope: least_squares_slope(&pts),
        reports,
        min_slope: 0.9,
    })
}

fn least_squares_slope(pts: &[(f64, f64)]) -> Option<f64> {
    if pts.len() < 2 {
        return None;
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    (sxx > 0.0).then(|| sxy / sxx)
}

/// Outcome of the gap-expansion implication for one ordered pair.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GapCase {
    pub n: usize,
    pub i: usize,
    pub j: usize,
    pub p: Vec<f64>,
    pub scores: Vec<f64>,
    pub grad_alpha_i: f64,
    pub grad_alpha_j: f64,
}

impl GapCase {
    pub fn holds(&self) -> bool {
        self.grad_alpha_j <= self.grad_alpha_i
    }
}

/// Evaluates the implication on scores `s` and softmax parameters `α`.
/// `None` when the premises `s_j < s_i` and `α_j ≥ α_i` do not both hold.
pub fn gap_case(scores: &[f64], alpha: &[f64], i: usize, j: usize) -> Option<GapCase> {
    if i == j || !(scores[j] < scores[i]) || !(alpha[j] >= alpha[i]) {
        return None;
    }
    let p = softmax(alpha);
    let ga = alpha_gradient(&p, scores, Activation::Softmax);
    Some(GapCase {
        n: scores.len(),
        i,
        j,
        grad_alpha_i: ga[i],
        grad_alpha_j: ga[j],
        p,
        scores: scores.to_vec(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GapExpansionReport {
    /// Premise-satisfying cases checked.
    pub instances: usize,
    /// Draws needed to collect them.
    pub draws: usize,
    pub violations: usize,
    /// `(checked, violations)` per op count.
    pub by_n: BTreeMap<usize, (usize, usize)>,
    /// Largest `∂L/∂α_j − ∂L/∂α_i`.
    pub max_violation: f64,
    pub first_violation: Option<GapCase>,
}

impl GapExpansionReport {
    pub fn passed(&self) -> bool {
        self.violations == 0
    }
}

/// Samples identity-model instances (`n ∈ [n_min, n_max]` ops, 2–6
/// classes, standard normal logits and `α`, random label and pair) until
/// `instances` of them satisfy both premises, then counts violations of
/// `∂L/∂α_j ≤ ∂L/∂α_i`.
pub fn check_gap_expansion(
    instances: usize,
    n_range: (usize, usize),
    seed: u64,
) -> Result<GapExpansionReport> {
    let (n_min, n_max) = n_range;
    if n_min < 2 || n_max < n_min {
        return Err(Error::invalid("op count range must satisfy 2 ≤ min ≤ max"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[710]));
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let mut report = GapExpansionReport {
        instances: 0,
        draws: 0,
        violations: 0,
        by_n: BTreeMap::new(),
        max_violation: 0.0,
        first_violation: None,
    };
    let max_draws = instances.saturating_mul(100).max(1000);
    while report.instances < instances {
        if report.draws >= max_draws {
            return Err(Error::invalid(format!(
                "only {} premise-satisfying cases in {} draws",
                report.instances, report.draws
            )));
        }
        report.draws += 1;
        let n = rng.random_range(n_min..=n_max);
        let c = rng.random_range(2..=6);
        let x: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..c).map(|_| normal.sample(&mut rng)).collect())
            .collect();
        let alpha: Vec<f64> = (0..n).map(|_| normal.sample(&mut rng)).collect();
        let label = rng.random_range(0..c);
        let i = rng.random_range(0..n);
        let j = rng.random_range(0..n);
        let inst = SimplifiedInstance::new(x, label, alpha, Activation::Softmax, 0.0)?;
        let Some(case) = gap_case(&inst.scores(), &inst.alpha, i, j) else {
            continue;
        };
        report.instances += 1;
        let entry = report.by_n.entry(n).or_insert((0, 0));
        entry.0 += 1;
        if !case.holds() {
            report.violations += 1;
            entry.1 += 1;
            report.max_violation = report
                .max_violation
                .max(case.grad_alpha_j - case.grad_alpha_i);
            if report.first_violation.is_none() {
                report.first_violation = Some(case);
            }
        }
    }
    Ok(report)
}

/// Closed-form step bound, flagged degenerate when `(1−ε)n = 1`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundValue {
    pub value: f64,
    pub degenerate: bool,
}

/// `n ln((1−ε)n) / (ηδ)`.
pub fn collapse_bound(n: usize, eta: f64, delta: f64, eps: f64) -> Result<BoundValue> {
    if n < 2 {
        return Err(Error::invalid(format!("n = {n} violates n ≥ 2")));
    }
    if !(eta > 0.0) || !eta.is_finite() {
        return Err(Error::invalid(format!("η = {eta} violates η > 0")));
    }
    if !(delta > 0.0) || !delta.is_finite() {
        return Err(Error::invalid(format!("δ = {delta} violates δ > 0")));
    }
    if !(eps > 0.0 && eps < 1.0) {
        return Err(Error::invalid(format!("ε = {eps} violates 0 < ε < 1")));
    }
    let m = (1.0 - eps) * n as f64;
    if (m - 1.0).abs() <= 1e-12 {
        return Ok(BoundValue {
            value: 0.0,
            degenerate: true,
        });
    }
    if m < 1.0 {
        return Err(Error::invalid(format!(
            "(1 − ε)·n = {m} violates (1 − ε)·n > 1"
        )));
    }
    Ok(BoundValue {
        value: n as f64 * m.ln() / (eta * delta),
        degenerate: false,
    })
}

/// Gradient descent on `α` against frozen per-op scores, `L = Σ_k p_k s_k`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FixedScoreProblem {
    pub scores: Vec<f64>,
    pub alpha0: Vec<f64>,
    pub eta: f64,
    pub activation: Activation,
}

impl FixedScoreProblem {
    /// Scores frozen at the instance's initial `α`.
    pub fn from_instance(inst: &SimplifiedInstance) -> Self {
        FixedScoreProblem {
            scores: inst.scores(),
            alpha0: inst.alpha.clone(),
            eta: inst.eta,
            activation: inst.activation,
        }
    }

    /// Index of the strictly smallest score and its margin `δ` to the rest.
    pub fn target(&self) -> Result<(usize, f64)> {
        let s = &self.scores;
        if s.len() < 2 {
            return Err(Error::invalid("need at least two ops"));
        }
        let star = (0..s.len())
            .min_by(|&a, &b| s[a].total_cmp(&s[b]))
            .expect("non-empty");
        let delta = (0..s.len())
            .filter(|&k| k != star)
            .map(|k| s[k] - s[star])
            .fold(f64::INFINITY, f64::min);
        if !(delta > 0.0) {
            return Err(Error::invalid("the smallest score must be strictly smallest (δ > 0)"));
        }
        Ok((star, delta))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DynamicsOutcome {
    pub target: usize,
    pub delta: f64,
    /// First update count after which `p_target > 1 − ε`; `None` when
    /// `max_steps` ran out.
    pub steps_to_eps: Option<usize>,
    pub steps_run: usize,
    /// `p` before the first update and after each one.
    pub trajectory: Vec<Vec<f64>>,
    /// `α_target − α_i` never decreased, for every `i`.
    pub gap_nondecreasing: bool,
    /// Smallest `p_target` seen while `α_target` was maximal.
    pub min_target_p_while_max: f64,
}

impl DynamicsOutcome {
    pub fn final_p(&self) -> &[f64] {
        self.trajectory.last().expect("initial state recorded")
    }
}

/// Runs descent on `problem` until `p_target > 1 − ε` or `max_steps`.
pub fn simulate_dynamics(
    problem: &FixedScoreProblem,
    eps: f64,
    max_steps: usize,
) -> Result<DynamicsOutcome> {
    let (star, delta) = problem.target()?;
    let n = problem.scores.len();
    if problem.alpha0.len() != n {
        return Err(Error::invalid("α and scores differ in length"));
    }
    if problem.alpha0.iter().any(|&a| a > problem.alpha0[star]) {
        return Err(Error::invalid("α of the target op must start maximal"));
    }
    if !(eps > 0.0 && eps < 1.0) || !(problem.eta > 0.0) {
        return Err(Error::invalid("need 0 < ε < 1 and η > 0"));
    }
    let mut alpha = problem.alpha0.clone();
    let mut p = activate(&alpha, problem.activation);
    let mut out = DynamicsOutcome {
        target: star,
        delta,
        steps_to_eps: (p[star] > 1.0 - eps).then_some(0),
        steps_run: 0,
        trajectory: vec![p.clone()],
        gap_nondecreasing: true,
        min_target_p_while_max: p[star],
    };
    while out.steps_to_eps.is_none() && out.steps_run < max_steps {
        let g = alpha_gradient(&p, &problem.scores, problem.activation);
        let before: Vec<f64> = alpha.iter().map(|a| alpha[star] - a).collect();
        for (a, gk) in alpha.iter_mut().zip(&g) {
            *a -= problem.eta * gk;
        }
        for (k, b) in before.iter().enumerate() {
            if alpha[star] - alpha[k] < b - 1e-12 * b.abs().max(1.0) {
                out.gap_nondecreasing = false;
            }
        }
        p = activate(&alpha, problem.activation);
        out.steps_run += 1;
        if alpha.iter().all(|&a| a <= alpha[star]) {
            out.min_target_p_while_max = out.min_target_p_while_max.min(p[star]);
        }
        if p[star] > 1.0 - eps {
            out.steps_to_eps = Some(out.steps_run);
        }
        out.trajectory.push(p.clone());
    }
    Ok(out)
}

/// One random bound configuration and its simulated step count.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundTrial {
    pub n: usize,
    pub eta: f64,
    pub delta: f64,
    pub eps: f64,
    pub scores: Vec<f64>,
    pub bound: f64,
    pub steps: Option<usize>,
    pub within: bool,
    pub gap_nondecreasing: bool,
    pub target_p_at_least_uniform: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CollapseBoundReport {
    pub trials: Vec<BoundTrial>,
    pub within: usize,
    /// Grid points where the bound failed to move the stated way.
    pub monotonicity_failures: Vec<String>,
}

impl CollapseBoundReport {
    pub fn all_within(&self) -> bool {
        self.within == self.trials.len()
    }

    pub fn monotone(&self) -> bool {
        self.monotonicity_failures.is_empty()
    }

    pub fn invariants_hold(&self) -> bool {
        self.trials
            .iter()
            .all(|t| t.gap_nondecreasing && t.target_p_at_least_uniform)
    }

    pub fn passed(&self) -> bool {
        self.all_within() && self.monotone()
    }
}

/// Scores with the target at 0, one rival at exactly `δ` and the others in
/// `[δ, 2δ)`; the target sits at a random index.
pub fn margin_scores(n: usize, delta: f64, rng: &mut impl Rng) -> Vec<f64> {
    let star = rng.random_range(0..n);
    let mut tight = rng.random_range(0..n - 1);
    if tight >= star {
        tight += 1;
    }
    (0..n)
        .map(|k| match k {
            _ if k == star => 0.0,
            _ if k == tight => delta,
            _ => delta * (1.0 + rng.random::<f64>()),
        })
        .collect()
}

/// Draws `configs` parameter sets (`n ∈ [2,10]`, `η ∈ [0.01,0.5]`,
/// `δ ∈ [0.1,2]`, `ε ∈ [0.05,0.3]`, `(1−ε)n > 1`), simulates softmax descent
/// from uniform `α`, and compares against the bound.
pub fn check_collapse_bound(configs: usize, seed: u64) -> Result<CollapseBoundReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[720]));
    let mut trials = Vec::with_capacity(configs);
    while trials.len() < configs {
        let n = rng.random_range(2..=10usize);
        let eta = rng.random_range(0.01..=0.5);
        let delta = rng.random_range(0.1..=2.0);
        let eps = rng.random_range(0.05..=0.3);
        if (1.0 - eps) * n as f64 <= 1.0 {
            continue;
        }
        let bound = collapse_bound(n, eta, delta, eps)?.value;
        let scores = margin_scores(n, delta, &mut rng);
        let problem = FixedScoreProblem {
            scores: scores.clone(),
            alpha0: vec![0.0; n],
            eta,
            activation: Activation::Softmax,
        };
        let max_steps = (100.0 * bound).ceil() as usize + 1000;
        let out = simulate_dynamics(&problem, eps, max_steps)?;
        trials.push(BoundTrial {
            n,
            eta,
            delta,
            eps,
            scores,
            bound,
            steps: out.steps_to_eps,
            within: out.steps_to_eps.is_some_and(|s| s as f64 <= bound),
            gap_nondecreasing: out.gap_nondecreasing,
            target_p_at_least_uniform: out.min_target_p_while_max >= 1.0 / n as f64 - 1e-12,
        });
    }
    Ok(CollapseBoundReport {
        within: trials.iter().filter(|t| t.within).count(),
        trials,
        monotonicity_failures: bound_monotonicity_failures(),
    })
}

/// Checks the bound rises with `n` and falls with `η` and `δ` on a grid.
pub fn bound_monotonicity_failures() -> Vec<String> {
    let ns: Vec<usize> = (2..=10).collect();
    let etas = [0.01, 0.05, 0.1, 0.2, 0.5];
    let deltas = [0.1, 0.5, 1.0, 2.0];
    let epss = [0.05, 0.1, 0.2, 0.3];
    let b = |n, eta, delta, eps| collapse_bound(n, eta, delta, eps).map(|v| v.value);
    let mut fails = Vec::new();
    for &eps in &epss {
        for &eta in &etas {
            for &delta in &deltas {
                for w in ns.windows(2) {
                    match (b(w[0], eta, delta, eps), b(w[1], eta, delta, eps)) {
                        (Ok(lo), Ok(hi)) if hi > lo => {}
                        _ => fails.push(format!("n {}→{} at η={eta} δ={delta} ε={eps}", w[0], w[1])),
                    }
                }
            }
        }
        for &n in &ns {
            for &delta in &deltas {
                for w in etas.windows(2) {
                    match (b(n, w[0], delta, eps), b(n, w[1], delta, eps)) {
                        (Ok(lo), Ok(hi)) if hi < lo => {}
                        _ => fails.push(format!("η {}→{} at n={n} δ={delta} ε={eps}", w[0], w[1])),
                    }
                }
            }
            for &eta in &etas {
                for w in deltas.windows(2) {
                    match (b(n, eta, w[0], eps), b(n, eta, w[1], eps)) {
                        (Ok(lo), Ok(hi)) if hi < lo => {}
                        _ => fails.push(format!("δ {}→{} at n={n} η={eta} ε={eps}", w[0], w[1])),
                    }
                }
            }
        }
    }
    fails
}

/// The same fixed scores under softmax and sigmoid mixing.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ActivationContrast {
    pub scores: Vec<f64>,
    pub softmax: DynamicsOutcome,
    pub sigmoid: DynamicsOutcome,
    /// Non-target ops whose sigmoid `p` ended above one half.
    pub sigmoid_survivors: Vec<usize>,
    /// Largest non-target softmax `p` at the end.
    pub softmax_max_other: f64,
}

impl ActivationContrast {
    /// Both reach the target, softmax pushes every rival under `ε`, and
    /// sigmoid keeps at least one rival alive.
    pub fn passed(&self, eps: f64) -> bool {
        self.softmax.steps_to_eps.is_some()
            && self.sigmoid.steps_to_eps.is_some()
            && self.softmax_max_other < eps
            && !self.sigmoid_survivors.is_empty()
    }
}

/// Runs `scores` under softmax from zero `α` and under sigmoid from the
/// sigmoid default `α`, both to `p_target > 1 − ε`.
pub fn contrast_activations(
    scores: &[f64],
    eta: f64,
    eps: f64,
    max_steps: usize,
) -> Result<ActivationContrast> {
    let n = scores.len();
    let run = |activation: Activation, init: f64| {
        simulate_dynamics(
            &FixedScoreProblem {
                scores: scores.to_vec(),
                alpha0: vec![init; n],
                eta,
                activation,
            },
            eps,
            max_steps,
        )
    };
    let softmax = run(Activation::Softmax, 0.0)?;
    let sigmoid = run(Activation::Sigmoid, Activation::Sigmoid.default_alpha_init())?;
    let star = softmax.target;
    let sigmoid_survivors = (0..n)
        .filter(|&k| k != star && sigmoid.final_p()[k] > 0.5)
        .collect();
    let softmax_max_other = (0..n)
        .filter(|&k| k != star)
        .map(|k| softmax.final_p()[k])
        .fold(0.0, f64::max);
    Ok(ActivationContrast {
        scores: scores.to_vec(),
        softmax,
        sigmoid,
        sigmoid_survivors,
        softmax_max_other,
    })
}

/// Every identity-model check with the default sizes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TheoryReport {
    pub seed: u64,
    pub loss_order: LossOrderScaling,
    pub loss_order_exact_at_zero: LossOrderReport,
    pub gap_expansion: GapExpansionReport,
    pub gap_expansion_two_ops: GapExpansionReport,
    pub collapse_bound: CollapseBoundReport,
    pub activation_contrast: ActivationContrast,
}

impl TheoryReport {
    /// `(name, passed)` for each check.
    pub fn checks(&self) -> Vec<(&'static str, bool)> {
        vec![
            ("loss_order_exact_at_zero", self.loss_order_exact_at_zero.passed()),
            ("loss_order_scaling", self.loss_order.passed()),
            ("gap_expansion", self.gap_expansion.passed()),
            ("gap_expansion_two_ops", self.gap_expansion_two_ops.passed()),
            ("collapse_bound_within", self.collapse_bound.all_within()),
            ("collapse_bound_monotone", self.collapse_bound.monotone()),
            ("collapse_invariants", self.collapse_bound.invariants_hold()),
            ("activation_contrast", self.activation_contrast.passed(0.1)),
        ]
    }

    pub fn passed(&self) -> bool {
        self.checks().iter().all(|c| c.1)
    }
}

/// Base logits of the loss-order check.
pub const LOSS_ORDER_BASE: [f64; 4] = [0.5, -0.3, 1.2, 0.0];

/// Scores of the activation contrast: the target plus one more op below
/// zero, two above.
pub const CONTRAST_SCORES: [f64; 4] = [-1.0, -0.5, 0.5, 1.0];

pub fn run_theory_suite(seed: u64) -> Result<TheoryReport> {
    let cfg = LossOrderConfig::default();
    Ok(TheoryReport {
        seed,
        loss_order: loss_order_scaling(&LOSS_ORDER_BASE, &LOSS_ORDER_SCALES, cfg, seed)?,
        loss_order_exact_at_zero: check_loss_order(&LOSS_ORDER_BASE, 0.0, cfg, seed)?,
        gap_expansion: check_gap_expansion(10_000, (2, 10), seed)?,
        gap_expansion_two_ops: check_gap_expansion(10_000, (2, 2), seed)?,
        collapse_bound: check_collapse_bound(50, seed)?,
        activation_contrast: contrast_activations(&CONTRAST_SCORES, 0.5, 0.1, 100_000)?,
    })
}
