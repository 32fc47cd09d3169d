//! Named experiment recipes: a base configuration, a grid of overrides and a
//! seed list. Every grid point × seed runs in a worker pool and writes its
//! own directory; the summary is rebuilt from those files in grid order.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{RunConfig, Space};
use crate::data::{generate, Task};
use crate::diagnostics::{
    correlation_separation, emit_traces, read_json, read_trace_csv, write_json,
    CorrelationSeparation, RunSummary,
};
use crate::error::{Error, Result};
use crate::optim::OptimizerKind;
use crate::oracle::{learnable_on_active_path, load_or_evaluate, OracleConfig, OracleTable};
use crate::search::{run_search, Regime};
use crate::theory::{run_theory_suite, TheoryReport};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecipeName {
    CollapseRepro,
    AblationBatch,
    AblationLr,
    AblationActivation,
    AblationOptimizer,
    CorrelationStudy,
    TheoremSuite,
    OracleStudy,
}

impl RecipeName {
    pub const ALL: [RecipeName; 8] = [
        RecipeName::CollapseRepro,
        RecipeName::AblationBatch,
        RecipeName::AblationLr,
        RecipeName::AblationActivation,
        RecipeName::AblationOptimizer,
        RecipeName::CorrelationStudy,
        RecipeName::TheoremSuite,
        RecipeName::OracleStudy,
    ];

    pub fn name(self) -> &'static str {
        match self {
            RecipeName::CollapseRepro => "collapse_repro",
            RecipeName::AblationBatch => "ablation_batch",
            RecipeName::AblationLr => "ablation_lr",
            RecipeName::AblationActivation => "ablation_activation",
            RecipeName::AblationOptimizer => "ablation_optimizer",
            RecipeName::CorrelationStudy => "correlation_study",
            RecipeName::TheoremSuite => "theorem_suite",
            RecipeName::OracleStudy => "oracle_study",
        }
    }
}

impl FromStr for RecipeName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        RecipeName::ALL
            .into_iter()
            .find(|r| r.name() == s)
            .ok_or_else(|| {
                let names: Vec<_> = RecipeName::ALL.iter().map(|r| r.name()).collect();
                Error::invalid(format!("unknown experiment `{s}` (one of {})", names.join(", ")))
            })
    }
}

impl fmt::Display for RecipeName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Overrides applied on top of the recipe's base configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridPoint {
    pub label: String,
    pub overrides: Vec<(String, String)>,
}

impl GridPoint {
    pub fn new(label: &str, overrides: &[(&str, &str)]) -> Self {
        GridPoint {
            label: label.to_string(),
            overrides: overrides
                .iter()
                .map(|(k, v)| (k.to_string(), v.to_string()))
                .collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Recipe {
    pub name: RecipeName,
    pub base: RunConfig,
    pub grid: Vec<GridPoint>,
    pub seeds: Vec<u64>,
}

fn regime_points(regimes: &[Regime], extra: &[(&str, &str)]) -> Vec<GridPoint> {
    regimes
        .iter()
        .map(|r| {
            let mut ov = vec![("regime", r.name())];
            ov.extend_from_slice(extra);
            GridPoint::new(r.name(), &ov)
        })
        .collect()
}

const TWO_REGIMES: [Regime; 2] = [Regime::Bilevel, Regime::SingleLevel];

impl Recipe {
    /// The recipe's grid over `base`. The space and α optimizer that define
    /// a recipe are pinned on the base; everything else comes from the
    /// caller (seeds from `base.seeds`).
    pub fn standard(name: RecipeName, base: &RunConfig) -> Recipe {
        let mut base = base.clone();
        let (space, optimizer) = match name {
            RecipeName::CollapseRepro | RecipeName::CorrelationStudy => {
                (Space::Nas201Desk, OptimizerKind::Adam)
            }
            RecipeName::OracleStudy => (Space::Micro, OptimizerKind::Adam),
            RecipeName::AblationBatch
            | RecipeName::AblationLr
            | RecipeName::AblationActivation
            | RecipeName::AblationOptimizer => (Space::Micro, OptimizerKind::Sgd),
            RecipeName::TheoremSuite => (base.space, base.optimizer),
        };
        base.space = space;
        base.optimizer = optimizer;
        if matches!(optimizer, OptimizerKind::Sgd) && name != RecipeName::AblationOptimizer {
            base.alpha_lr = None;
        }
        let grid = match name {
            RecipeName::CollapseRepro | RecipeName::OracleStudy => regime_points(&TWO_REGIMES, &[]),
            RecipeName::AblationBatch => regime_points(&Regime::ALL, &[]),
            RecipeName::AblationLr => {
                let mut g = Vec::new();
                for r in TWO_REGIMES {
                    for lr in ["0.001", "0.005", "0.025"] {
                        g.push(GridPoint::new(
                            &format!("{}-lr{lr}", r.name()),
                            &[("regime", r.name()), ("lr", lr)],
                        ));
                    }
                }
                g
            }
            RecipeName::AblationActivation => {
                let mut g = Vec::new();
                for r in TWO_REGIMES {
                    g.push(GridPoint::new(
                        &format!("{}-softmax", r.name()),
                        &[("regime", r.name()), ("activation", "softmax")],
                    ));
                    g.push(GridPoint::new(
                        &format!("{}-sigmoid", r.name()),
                        &[("regime", r.name()), ("activation", "sigmoid")],
                    ));
                    g.push(GridPoint::new(
                        &format!("{}-sigmoid-init0", r.name()),
                        &[("regime", r.name()), ("activation", "sigmoid"), ("alpha_init", "0")],
                    ));
                }
                g
            }
            RecipeName::AblationOptimizer => {
                let mut g = Vec::new();
                for r in TWO_REGIMES {
                    for opt in ["sgd", "adam"] {
                        g.push(GridPoint::new(
                            &format!("{}-{opt}", r.name()),
                            &[("regime", r.name()), ("optimizer", opt), ("alpha_lr", "default")],
                        ));
                    }
                }
                g
            }
            RecipeName::CorrelationStudy => {
                vec![GridPoint::new("single_level", &[("regime", "single_level")])]
            }
            RecipeName::TheoremSuite => Vec::new(),
        };
        let seeds = match name {
            RecipeName::CorrelationStudy | RecipeName::TheoremSuite => vec![base.seed],
            _ => base.seeds.clone(),
        };
        Recipe {
            name,
            base,
            grid,
            seeds,
        }
    }

    /// Configuration of one grid point.
    pub fn resolve(&self, point: &GridPoint) -> Result<RunConfig> {
        let mut cfg = self.base.clone();
        for (k, v) in &point.overrides {
            cfg.set(k, v).map_err(|m| {
                Error::invalid(format!("grid point {}: {k} = {v}: {m}", point.label))
            })?;
        }
        cfg.validate()
            .map_err(|e| Error::invalid(format!("grid point {}: {e}", point.label)))?;
        Ok(cfg)
    }
}

/// One finished search, as read back from its run directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub label: String,
    pub seed: u64,
    pub architecture: String,
    pub final_loss_train: Option<f64>,
    /// Oracle rank and percentile; `None` without an oracle table.
    pub rank: Option<usize>,
    pub percentile: Option<f64>,
    pub nonlearnable_edges: usize,
    pub edges: usize,
}

/// Statistics of one grid point over its seeds. `std` is the sample
/// standard deviation (0 for a single seed).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub label: String,
    pub runs: usize,
    pub percentile_mean: Option<f64>,
    pub percentile_std: Option<f64>,
    /// Lower median.
    pub rank_median: Option<usize>,
    pub final_loss_mean: Option<f64>,
    pub final_loss_std: Option<f64>,
    pub nonlearnable_mean: f64,
}

fn mean_std(v: &[f64]) -> Option<(f64, f64)> {
    if v.is_empty() {
        return None;
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let std = if v.len() > 1 {
        (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    Some((mean, std))
}

pub fn lower_median(v: &[usize]) -> Option<usize> {
    let mut s = v.to_vec();
    s.sort_unstable();
    s.get(s.len().saturating_sub(1) / 2).copied()
}

/// Decile of `rank / size`.
pub fn rank_band(rank: usize, size: usize) -> usize {
    (10 * rank).div_ceil(size)
}

impl SummaryRow {
    pub fn from_records(label: &str, records: &[&RunRecord]) -> Self {
        let pct: Vec<f64> = records.iter().filter_map(|r| r.percentile).collect();
        let ranks: Vec<usize> = records.iter().filter_map(|r| r.rank).collect();
        let losses: Vec<f64> = records.iter().filter_map(|r| r.final_loss_train).collect();
        let p = mean_std(&pct);
        let l = mean_std(&losses);
        let nl: Vec<f64> = records.iter().map(|r| r.nonlearnable_edges as f64).collect();
        SummaryRow {
            label: label.to_string(),
            runs: records.len(),
            percentile_mean: p.map(|x| x.0),
            percentile_std: p.map(|x| x.1),
            rank_median: lower_median(&ranks),
            final_loss_mean: l.map(|x| x.0),
            final_loss_std: l.map(|x| x.1),
            nonlearnable_mean: mean_std(&nl).map_or(0.0, |x| x.0),
        }
    }
}

/// A pass/fail statement checked by a recipe. `criterion` names the
/// acceptance criterion it stands for, if any.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Assertion {
    pub name: String,
    pub criterion: Option<u8>,
    pub passed: bool,
    pub detail: String,
}

impl Assertion {
    fn new(name: &str, criterion: Option<u8>, passed: bool, detail: String) -> Self {
        Assertion {
            name: name.to_string(),
            criterion,
            passed,
            detail,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleSummary {
    pub size: usize,
    pub best: String,
    pub best_accuracy: f64,
    pub learnability_check: bool,
}

/// Result of [`run_experiment`]. Contains no timings, so equal inputs give
/// equal bytes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSummary {
    pub recipe: RecipeName,
    pub seeds: Vec<u64>,
    pub rows: Vec<SummaryRow>,
    pub runs: Vec<RunRecord>,
    /// Grid points that did not resolve to a valid configuration.
    pub skipped: Vec<String>,
    pub oracle: Option<OracleSummary>,
    pub correlation: Option<CorrelationSeparation>,
    pub theory: Option<TheoryReport>,
    pub assertions: Vec<Assertion>,
}

impl ExperimentSummary {
    pub fn passed(&self) -> bool {
        self.skipped.is_empty() && self.assertions.iter().all(|a| a.passed)
    }

    pub fn row(&self, label: &str) -> Option<&SummaryRow> {
        self.rows.iter().find(|r| r.label == label)
    }

    pub fn records(&self, label: &str) -> Vec<&RunRecord> {
        self.runs.iter().filter(|r| r.label == label).collect()
    }

    pub fn assertion(&self, name: &str) -> Option<&Assertion> {
        self.assertions.iter().find(|a| a.name == name)
    }

    pub fn to_markdown(&self) -> String {
        let cell = |t: &str| t.replace('|', "\\|");
        let opt = |v: Option<f64>, d: usize| v.map_or("-".to_string(), |x| format!("{x:.d$}"));
        let mut s = format!("# {}\n\nseeds: {:?}\n\n", self.recipe, self.seeds);
        if !self.rows.is_empty() {
            s.push_str("| grid point | runs | percentile | median rank | final train loss | non-learnable edges |\n");
            s.push_str("|---|---|---|---|---|---|\n");
            for r in &self.rows {
                s.push_str(&format!(
                    "| {} | {} | {} ± {} | {} | {} ± {} | {:.2} |\n",
                    cell(&r.label),
                    r.runs,
                    opt(r.percentile_mean, 3),
                    opt(r.percentile_std, 3),
                    r.rank_median.map_or("-".to_string(), |x| x.to_string()),
                    opt(r.final_loss_mean, 4),
                    opt(r.final_loss_std, 4),
                    r.nonlearnable_mean,
                ));
            }
            s.push('\n');
        }
        if let Some(o) = &self.oracle {
            s.push_str(&format!(
                "oracle: {} architectures, best `{}` ({:.4}), learnability check {}\n\n",
                o.size,
                o.best,
                o.best_accuracy,
                if o.learnability_check { "passed" } else { "failed" }
            ));
        }
        if let Some(c) = &self.correlation {
            s.push_str("| cell | same-batch | abs cross-batch | ratio |\n|---|---|---|---|\n");
            let ratios = c.ratios();
            for (i, ratio) in ratios.iter().enumerate() {
                s.push_str(&format!(
                    "| {i} | {:.4e} | {:.4e} | {ratio:.3} |\n",
                    c.cell_same[i], c.cell_cross[i]
                ));
            }
            s.push('\n');
        }
        if let Some(t) = &self.theory {
            s.push_str("| check | result |\n|---|---|\n");
            for (name, ok) in t.checks() {
                s.push_str(&format!("| {name} | {} |\n", if ok { "pass" } else { "fail" }));
            }
            s.push('\n');
        }
        for k in &self.skipped {
            s.push_str(&format!("skipped: {k}\n"));
        }
        if !self.skipped.is_empty() {
            s.push('\n');
        }
        s.push_str("| assertion | criterion | result | detail |\n|---|---|---|---|\n");
        for a in &self.assertions {
            s.push_str(&format!(
                "| {} | {} | {} | {} |\n",
                a.name,
                a.criterion.map_or("-".to_string(), |c| c.to_string()),
                if a.passed { "PASS" } else { "FAIL" },
                cell(&a.detail)
            ));
        }
        s
    }
}

pub fn run_dir(out: &Path, label: &str, seed: u64) -> PathBuf {
    out.join("runs").join(format!("{label}-seed{seed}"))
}

/// Reads one run directory back into a record.
pub fn read_run(dir: &Path, label: &str, oracle: Option<&OracleTable>) -> Result<RunRecord> {
    let summary: RunSummary = read_json(&dir.join("summary.json"))?;
    let trace = read_trace_csv(&dir.join("trace.csv"))?;
    let (rank, percentile) = match oracle {
        Some(t) => {
            let entry = t.entries.get(&summary.architecture).ok_or_else(|| {
                Error::invalid(format!("{} is not in the oracle table", summary.architecture))
            })?;
            let (r, p) = t.rank_of(&entry.architecture)?;
            (Some(r), Some(p))
        }
        None => (None, None),
    };
    let edges = summary.final_p.len();
    let nonlearnable_edges = nonlearnable_from_label(&summary.architecture, edges)?;
    Ok(RunRecord {
        label: label.to_string(),
        seed: summary.seed,
        architecture: summary.architecture,
        final_loss_train: trace.last().map(|r| r.loss_train),
        rank,
        percentile,
        nonlearnable_edges,
        edges,
    })
}

fn nonlearnable_from_label(label: &str, edges: usize) -> Result<usize> {
    let ops: Vec<crate::ops::OpKind> = if label.starts_with('[') {
        serde_json::from_str(label).map_err(|e| Error::invalid(e.to_string()))?
    } else {
        label
            .split(['|', '+'])
            .filter(|s| !s.is_empty())
            .map(|item| item.split('~').next().unwrap_or(item).parse())
            .collect::<Result<_>>()?
    };
    if ops.len() != edges {
        return Err(Error::invalid(format!(
            "architecture `{label}` has {} edges, the run has {edges}",
            ops.len()
        )));
    }
    Ok(ops.iter().filter(|k| !k.is_learnable()).count())
}

/// Rebuilds the per-run records and summary rows of a finished recipe from
/// its run directories.
pub fn recompute(
    recipe: &Recipe,
    out: &Path,
    oracle: Option<&OracleTable>,
    skipped: &[String],
) -> Result<(Vec<RunRecord>, Vec<SummaryRow>)> {
    let mut runs = Vec::new();
    let mut rows = Vec::new();
    for point in &recipe.grid {
        if skipped.iter().any(|s| s.starts_with(&format!("{}:", point.label))) {
            continue;
        }
        let recs: Vec<RunRecord> = recipe
            .seeds
            .iter()
            .map(|&s| read_run(&run_dir(out, &point.label, s), &point.label, oracle))
            .collect::<Result<_>>()?;
        rows.push(SummaryRow::from_records(&point.label, &recs.iter().collect::<Vec<_>>()));
        runs.extend(recs);
    }
    Ok((runs, rows))
}

/// Where a recipe's outputs go.
#[derive(Clone, Debug, Default)]
pub struct ExperimentOptions {
    /// Oracle table cache; defaults to `<out>/oracle`.
    pub oracle_dir: Option<PathBuf>,
}

fn needs_oracle(recipe: &Recipe) -> bool {
    recipe.base.space == Space::Micro && !recipe.grid.is_empty()
}

/// Runs every grid point × seed, writes `config.txt`, `runs/<label>-seed<k>/`,
/// `summary.json` and `summary.md` under `out`, and evaluates the recipe's
/// assertions.
pub fn run_experiment(recipe: &Recipe, out: &Path, opts: &ExperimentOptions) -> Result<ExperimentSummary> {
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let echo = out.join("config.txt");
    std::fs::write(&echo, recipe.base.render()).map_err(|e| Error::io(&echo, e))?;

    let mut summary = ExperimentSummary {
        recipe: recipe.name,
        seeds: recipe.seeds.clone(),
        rows: Vec::new(),
        runs: Vec::new(),
        skipped: Vec::new(),
        oracle: None,
        correlation: None,
        theory: None,
        assertions: Vec::new(),
    };

    if recipe.name == RecipeName::TheoremSuite {
        let report = run_theory_suite(recipe.base.seed)?;
        write_json(&report, &out.join("theory.json"))?;
        summary.assertions = theory_assertions(&report);
        summary.theory = Some(report);
        return finish(summary, out);
    }

    let mut resolved = Vec::new();
    for point in &recipe.grid {
        match recipe.resolve(point) {
            Ok(cfg) => resolved.push((point, cfg)),
            Err(e) => summary.skipped.push(format!("{}: {e}", point.label)),
        }
    }
    if recipe.seeds.is_empty() {
        return Err(Error::invalid("recipe has no seeds"));
    }

    let task = generate(&recipe.base.dataset())?;
    let oracle = if needs_oracle(recipe) {
        let dir = opts.oracle_dir.clone().unwrap_or_else(|| out.join("oracle"));
        let ocfg = OracleConfig {
            net: recipe.base.net(),
            ..OracleConfig::micro()
        };
        let table = load_or_evaluate(&task, &ocfg, &dir)?;
        let best = table.best();
        summary.oracle = Some(OracleSummary {
            size: table.len(),
            best: best.architecture.label(&table.net.spec),
            best_accuracy: best.mean_val_accuracy,
            learnability_check: table.learnability_check(),
        });
        Some(table)
    } else {
        None
    };

    let jobs: Vec<(&GridPoint, &RunConfig, u64)> = resolved
        .iter()
        .flat_map(|(p, c)| recipe.seeds.iter().map(move |&s| (*p, c, s)))
        .collect();
    let results: Vec<Result<Option<CorrelationSeparation>>> = jobs
        .par_iter()
        .map(|(point, cfg, seed)| run_one(recipe, point, cfg, *seed, &task, out))
        .collect();
    for r in results {
        if let Some(c) = r? {
            summary.correlation = Some(c);
        }
    }

    let (runs, rows) = recompute(recipe, out, oracle.as_ref(), &summary.skipped)?;
    summary.runs = runs;
    summary.rows = rows;
    summary.assertions = recipe_assertions(recipe.name, &summary);
    finish(summary, out)
}

fn run_one(
    recipe: &Recipe,
    point: &GridPoint,
    cfg: &RunConfig,
    seed: u64,
    task: &Task,
    out: &Path,
) -> Result<Option<CorrelationSeparation>> {
    let result = run_search(&cfg.search(seed), task)?;
    emit_traces(&result, None, &run_dir(out, &point.label, seed))?;
    if recipe.name != RecipeName::CorrelationStudy {
        return Ok(None);
    }
    let sep = correlation_separation(&result.net, &task.train, cfg.batch_size, CORRELATION_PAIRS, seed)?;
    write_json(&sep, &run_dir(out, &point.label, seed).join("correlation.json"))?;
    Ok(Some(sep))
}

/// Batch pairs of the correlation study.
pub const CORRELATION_PAIRS: usize = 200;

fn finish(summary: ExperimentSummary, out: &Path) -> Result<ExperimentSummary> {
    write_json(&summary, &out.join("summary.json"))?;
    let md = out.join("summary.md");
    std::fs::write(&md, summary.to_markdown()).map_err(|e| Error::io(&md, e))?;
    Ok(summary)
}

pub fn theory_assertions(t: &TheoryReport) -> Vec<Assertion> {
    let g = &t.gap_expansion;
    let c = &t.collapse_bound;
    let within = c.trials.iter().filter(|x| x.within).count();
    let mut v = vec![
        Assertion::new(
            "gap_expansion",
            Some(2),
            g.passed(),
            format!("{} violations in {} instances", g.violations, g.instances),
        ),
        Assertion::new(
            "collapse_bound",
            Some(3),
            c.all_within() && c.monotone(),
            format!(
                "{within} of {} within the bound, {} monotonicity failures",
                c.trials.len(),
                c.monotonicity_failures.len()
            ),
        ),
        Assertion::new(
            "loss_order_scaling",
            Some(4),
            t.loss_order.passed(),
            t.loss_order
                .slope
                .map_or("no positive points".to_string(), |x| format!("fitted slope {x:.3}")),
        ),
    ];
    for (name, ok) in t.checks() {
        if matches!(name, "gap_expansion" | "collapse_bound_within" | "collapse_bound_monotone" | "loss_order_scaling") {
            continue;
        }
        v.push(Assertion::new(name, None, ok, String::new()));
    }
    v
}

fn pct_by_seed(s: &ExperimentSummary, label: &str) -> Vec<Option<f64>> {
    s.seeds
        .iter()
        .map(|&seed| {
            s.runs
                .iter()
                .find(|r| r.label == label && r.seed == seed)
                .and_then(|r| r.percentile)
        })
        .collect()
}

fn ranks(s: &ExperimentSummary, label: &str) -> Vec<usize> {
    s.records(label).iter().filter_map(|r| r.rank).collect()
}

fn show(v: &[Option<usize>]) -> String {
    let parts: Vec<String> = v
        .iter()
        .map(|x| x.map_or("-".to_string(), |r| r.to_string()))
        .collect();
    format!("[{}]", parts.join(", "))
}

fn median(s: &ExperimentSummary, label: &str) -> Option<usize> {
    s.row(label).and_then(|r| r.rank_median)
}

/// "≥ 4 of 5" scaled to the seed count: all but one seed.
fn majority_needed(seeds: usize) -> usize {
    seeds.saturating_sub(1).max(1)
}

pub fn recipe_assertions(name: RecipeName, s: &ExperimentSummary) -> Vec<Assertion> {
    let mut v = Vec::new();
    if let Some(o) = &s.oracle {
        v.push(Assertion::new(
            "oracle_learnability",
            None,
            o.learnability_check,
            format!("best {} at {:.4}", o.best, o.best_accuracy),
        ));
    }
    let need = majority_needed(s.seeds.len());
    match name {
        RecipeName::AblationBatch => {
            let bi = pct_by_seed(s, Regime::Bilevel.name());
            let same = pct_by_seed(s, Regime::SameSubsetDiffBatch.name());
            let single = pct_by_seed(s, Regime::SingleLevel.name());
            let ok = (0..s.seeds.len())
                .filter(|&i| match (single[i], same[i], bi[i]) {
                    (Some(a), Some(b), Some(c)) => a <= b && b <= c,
                    _ => false,
                })
                .count();
            v.push(Assertion::new(
                "collapse_ordering",
                Some(6),
                ok >= need,
                format!("ordering holds in {ok} of {} seeds", s.seeds.len()),
            ));
        }
        RecipeName::OracleStudy => {
            let single = s.records(Regime::SingleLevel.name());
            let archs: std::collections::BTreeSet<&str> =
                single.iter().map(|r| r.architecture.as_str()).collect();
            let top = single.iter().all(|r| r.percentile.is_some_and(|p| p <= 0.1));
            v.push(Assertion::new(
                "single_level_stable_top10",
                Some(7),
                archs.len() == 1 && top && !single.is_empty(),
                format!(
                    "{} distinct architectures, ranks {:?}",
                    archs.len(),
                    ranks(s, Regime::SingleLevel.name())
                ),
            ));
            let bi = pct_by_seed(s, Regime::Bilevel.name());
            let sl = pct_by_seed(s, Regime::SingleLevel.name());
            let worse = (0..s.seeds.len())
                .filter(|&i| matches!((bi[i], sl[i]), (Some(b), Some(a)) if b > a))
                .count();
            v.push(Assertion::new(
                "bilevel_worse",
                Some(7),
                worse >= need,
                format!(
                    "bi-level strictly worse in {worse} of {} seeds, ranks {:?}",
                    s.seeds.len(),
                    ranks(s, Regime::Bilevel.name())
                ),
            ));
        }
        RecipeName::AblationLr => {
            let lrs = ["0.001", "0.005", "0.025"];
            let bi: Vec<Option<usize>> = lrs.iter().map(|lr| median(s, &format!("bilevel-lr{lr}"))).collect();
            let sl: Vec<Option<usize>> =
                lrs.iter().map(|lr| median(s, &format!("single_level-lr{lr}"))).collect();
            let bi_ok = bi.iter().all(Option::is_some) && {
                let b: Vec<usize> = bi.iter().flatten().copied().collect();
                b.windows(2).all(|w| w[0] <= w[1]) && b.windows(2).any(|w| w[0] < w[1])
            };
            v.push(Assertion::new(
                "bilevel_degrades_with_lr",
                Some(8),
                bi_ok,
                format!("bi-level median ranks {}", show(&bi)),
            ));
            let size = s.oracle.as_ref().map_or(27, |o| o.size);
            let bands: Vec<usize> = sl.iter().flatten().map(|&r| rank_band(r, size)).collect();
            let spread = bands.iter().max().zip(bands.iter().min()).map(|(a, b)| a - b);
            v.push(Assertion::new(
                "single_level_lr_stable",
                Some(8),
                bands.len() == lrs.len() && spread.is_some_and(|d| d <= 1),
                format!("single-level median ranks {}, bands {bands:?}", show(&sl)),
            ));
        }
        RecipeName::AblationActivation => {
            let soft = median(s, "single_level-softmax");
            let sig = median(s, "single_level-sigmoid");
            v.push(Assertion::new(
                "sigmoid_not_worse",
                Some(8),
                matches!((sig, soft), (Some(a), Some(b)) if a <= b),
                format!("single-level median rank sigmoid {}, softmax {}", show(&[sig]), show(&[soft])),
            ));
        }
        RecipeName::AblationOptimizer => {
            for opt in ["sgd", "adam"] {
                let bi = median(s, &format!("bilevel-{opt}"));
                let sl = median(s, &format!("single_level-{opt}"));
                v.push(Assertion::new(
                    &format!("single_level_not_worse_{opt}"),
                    None,
                    matches!((sl, bi), (Some(a), Some(b)) if a <= b),
                    format!("median rank single-level {}, bi-level {}", show(&[sl]), show(&[bi])),
                ));
            }
        }
        RecipeName::CollapseRepro => {
            let collapsed = |label: &str| {
                s.records(label)
                    .iter()
                    .filter(|r| 2 * r.nonlearnable_edges >= r.edges)
                    .count()
            };
            let n = s.seeds.len();
            let bi = collapsed(Regime::Bilevel.name());
            let sl = collapsed(Regime::SingleLevel.name());
            v.push(Assertion::new(
                "bilevel_collapses",
                None,
                2 * bi > n,
                format!("{bi} of {n} bi-level runs have at least half their edges non-learnable"),
            ));
            v.push(Assertion::new(
                "single_level_keeps_learnable",
                None,
                2 * sl < n,
                format!("{sl} of {n} single-level runs have at least half their edges non-learnable"),
            ));
        }
        RecipeName::CorrelationStudy => {
            if let Some(c) = &s.correlation {
                let ratios = c.ratios();
                let probe = c.probe_cells();
                let ok = probe.iter().all(|&i| ratios[i] < 0.1);
                let shown: Vec<String> = probe.iter().map(|&i| format!("{:.3}", ratios[i])).collect();
                v.push(Assertion::new(
                    "correlation_separation",
                    Some(5),
                    ok,
                    format!("cross/same ratio at cells {probe:?}: {}", shown.join(", ")),
                ));
            }
        }
        RecipeName::TheoremSuite => {}
    }
    v
}

/// True when every architecture in `records` has a learnable op on an
/// active path of the micro cell.
pub fn all_learnable_routed(records: &[&RunRecord]) -> Result<bool> {
    let spec = Space::Micro.net().spec;
    for r in records {
        let arch = crate::space::Architecture::parse_nas201(&r.architecture, &spec)?;
        if !learnable_on_active_path(&arch, &spec) {
            return Ok(false);
        }
    }
    Ok(true)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quick_base() -> RunConfig {
        RunConfig {
            epochs: 1,
            n_train: 128,
            n_val: 64,
            n_test: 64,
            seeds: vec![0],
            ..RunConfig::default()
        }
    }

    #[test]
    fn names_round_trip() {
        for r in RecipeName::ALL {
            assert_eq!(r.name().parse::<RecipeName>().unwrap(), r);
        }
        assert!("nope".parse::<RecipeName>().is_err());
    }

    #[test]
    fn every_grid_point_resolves() {
        let base = RunConfig::default();
        for name in RecipeName::ALL {
            let r = Recipe::standard(name, &base);
            for p in &r.grid {
                r.resolve(p).unwrap();
            }
        }
    }

    #[test]
    fn ablation_batch_grid_is_worst_to_best() {
        let r = Recipe::standard(RecipeName::AblationBatch, &RunConfig::default());
        let labels: Vec<_> = r.grid.iter().map(|p| p.label.as_str()).collect();
        assert_eq!(labels, ["bilevel", "same_subset_diff_batch", "single_level"]);
        assert_eq!(r.base.space, Space::Micro);
        assert_eq!(r.base.optimizer, OptimizerKind::Sgd);
    }

    #[test]
    fn bad_grid_point_is_rejected() {
        let r = Recipe::standard(RecipeName::CollapseRepro, &RunConfig::default());
        let bad = GridPoint::new("bad", &[("lr", "-1")]);
        let err = r.resolve(&bad).unwrap_err().to_string();
        assert!(err.contains("bad"), "{err}");
        let unknown = GridPoint::new("typo", &[("learning_rate", "0.1")]);
        assert!(r.resolve(&unknown).is_err());
    }

    #[test]
    fn statistics() {
        assert_eq!(mean_std(&[]), None);
        assert_eq!(mean_std(&[2.0]), Some((2.0, 0.0)));
        let (m, s) = mean_std(&[1.0, 3.0]).unwrap();
        assert_eq!(m, 2.0);
        assert!((s - 2f64.sqrt()).abs() < 1e-15);
        assert_eq!(lower_median(&[5, 1, 3, 2]), Some(2));
        assert_eq!(lower_median(&[23, 2, 23, 10, 10]), Some(10));
        assert_eq!(lower_median(&[]), None);
        assert_eq!(rank_band(2, 27), 1);
        assert_eq!(rank_band(3, 27), 2);
        assert_eq!(rank_band(27, 27), 10);
    }

    #[test]
    fn label_parsing_counts_nonlearnable() {
        let label = "|nor_conv_3x3~0|+|skip_connect~0|none~1|";
        assert_eq!(nonlearnable_from_label(label, 3).unwrap(), 2);
        assert!(nonlearnable_from_label(label, 6).is_err());
    }

    #[test]
    fn singleton_grid_writes_one_trace() {
        let dir = tempfile::tempdir().unwrap();
        let mut recipe = Recipe::standard(RecipeName::CollapseRepro, &quick_base());
        recipe.grid.truncate(1);
        let s = run_experiment(&recipe, dir.path(), &ExperimentOptions::default()).unwrap();
        let traces: Vec<_> = walk(dir.path())
            .into_iter()
            .filter(|p| p.file_name().is_some_and(|n| n == "trace.csv"))
            .collect();
        assert_eq!(traces.len(), 1);
        assert_eq!(s.runs.len(), 1);
        assert_eq!(s.rows.len(), 1);
        assert!(dir.path().join("config.txt").exists());
        assert!(dir.path().join("summary.md").exists());
    }

    #[test]
    fn invalid_point_is_listed_and_fails() {
        let dir = tempfile::tempdir().unwrap();
        let mut recipe = Recipe::standard(RecipeName::CollapseRepro, &quick_base());
        recipe.grid.truncate(1);
        recipe.grid.push(GridPoint::new("broken", &[("batch_size", "0")]));
        let s = run_experiment(&recipe, dir.path(), &ExperimentOptions::default()).unwrap();
        assert_eq!(s.skipped.len(), 1);
        assert!(s.skipped[0].starts_with("broken:"));
        assert_eq!(s.rows.len(), 1);
        assert!(!s.passed());
    }

    #[test]
    fn summary_recomputes_from_run_files() {
        let dir = tempfile::tempdir().unwrap();
        let mut base = quick_base();
        base.seeds = vec![0, 1];
        let recipe = Recipe::standard(RecipeName::CollapseRepro, &base);
        let s = run_experiment(&recipe, dir.path(), &ExperimentOptions::default()).unwrap();
        let (runs, rows) = recompute(&recipe, dir.path(), None, &[]).unwrap();
        assert_eq!(runs, s.runs);
        assert_eq!(rows, s.rows);
        let stored: ExperimentSummary = read_json(&dir.path().join("summary.json")).unwrap();
        assert_eq!(stored, s);
    }

    #[test]
    fn echoed_config_reflects_overrides() {
        let dir = tempfile::tempdir().unwrap();
        let mut base = quick_base();
        base.set("lr", "0.025").unwrap();
        let mut recipe = Recipe::standard(RecipeName::CollapseRepro, &base);
        recipe.grid.truncate(1);
        run_experiment(&recipe, dir.path(), &ExperimentOptions::default()).unwrap();
        let echo = std::fs::read_to_string(dir.path().join("config.txt")).unwrap();
        assert!(echo.contains("lr = 0.025\n"), "{echo}");
        assert_eq!(RunConfig::parse(&echo, &[]).unwrap(), recipe.base);
    }

    fn walk(dir: &Path) -> Vec<PathBuf> {
        let mut v = Vec::new();
        for e in std::fs::read_dir(dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                v.extend(walk(&p));
            } else {
                v.push(p);
            }
        }
        v
    }
}
