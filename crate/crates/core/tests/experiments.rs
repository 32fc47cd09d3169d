use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use dartslab::config::RunConfig;
use dartslab::diagnostics::{collapse_detector, read_json, read_trace_csv};
use dartslab::experiments::{
    recompute, run_dir, run_experiment, ExperimentOptions, ExperimentSummary, Recipe, RecipeName,
};
use dartslab::space::NetConfig;
use dartslab::theory::TheoryReport;
use dartslab::Error;

fn files(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(root).unwrap().to_path_buf(), std::fs::read(&p).unwrap());
            }
        }
    }
    out
}

fn small_base() -> RunConfig {
    RunConfig {
        epochs: 2,
        n_train: 256,
        n_val: 128,
        n_test: 64,
        seeds: vec![0, 1],
        ..RunConfig::default()
    }
}

#[test]
fn reruns_reproduce_every_output_byte() {
    let recipe = Recipe::standard(RecipeName::AblationBatch, &small_base());
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let sa = run_experiment(&recipe, a.path(), &ExperimentOptions::default()).unwrap();
    let sb = run_experiment(&recipe, b.path(), &ExperimentOptions::default()).unwrap();
    assert_eq!(sa, sb);
    let (fa, fb) = (files(a.path()), files(b.path()));
    assert_eq!(fa.keys().collect::<Vec<_>>(), fb.keys().collect::<Vec<_>>());
    assert_eq!(fa, fb);
    // 3 regimes × 2 seeds, each with a trace and a summary.
    let traces = fa.keys().filter(|p| p.ends_with("trace.csv")).count();
    assert_eq!(traces, 6);
    let labels: Vec<&str> = sa.rows.iter().map(|r| r.label.as_str()).collect();
    assert_eq!(labels, ["bilevel", "same_subset_diff_batch", "single_level"]);
}

#[test]
fn echoed_config_reproduces_the_run() {
    let recipe = Recipe::standard(RecipeName::AblationOptimizer, &small_base());
    let a = tempfile::tempdir().unwrap();
    let first = run_experiment(&recipe, a.path(), &ExperimentOptions::default()).unwrap();
    let echoed = RunConfig::load(Some(&a.path().join("config.txt")), &[]).unwrap();
    let again = Recipe::standard(RecipeName::AblationOptimizer, &echoed);
    let b = tempfile::tempdir().unwrap();
    let second = run_experiment(&again, b.path(), &ExperimentOptions::default()).unwrap();
    assert_eq!(first, second);
}

#[test]
fn theorem_suite_writes_reports() {
    let dir = tempfile::tempdir().unwrap();
    let recipe = Recipe::standard(RecipeName::TheoremSuite, &RunConfig::default());
    let s = run_experiment(&recipe, dir.path(), &ExperimentOptions::default()).unwrap();
    let report: TheoryReport = read_json(&dir.path().join("theory.json")).unwrap();
    assert_eq!(Some(&report), s.theory.as_ref());
    let stored: ExperimentSummary = read_json(&dir.path().join("summary.json")).unwrap();
    assert_eq!(stored, s);
    let by_name = |n: &str| s.assertion(n).unwrap().passed;
    // The gap-expansion and step-bound statements are false as stated.
    assert!(!by_name("gap_expansion"));
    assert!(!by_name("collapse_bound"));
    for name in [
        "loss_order_scaling",
        "loss_order_exact_at_zero",
        "gap_expansion_two_ops",
        "collapse_invariants",
        "activation_contrast",
    ] {
        assert!(by_name(name), "{name}");
    }
    assert!(report.collapse_bound.monotone());
    assert!(!s.passed());
}

#[test]
fn config_files() {
    let dir = tempfile::tempdir().unwrap();
    let empty = dir.path().join("empty.cfg");
    std::fs::write(&empty, "").unwrap();
    assert_eq!(RunConfig::load(Some(&empty), &[]).unwrap(), RunConfig::default());

    let dup = dir.path().join("dup.cfg");
    std::fs::write(&dup, "# sweep\nlr = 0.005\nepochs = 3\nlr = 0.025\n").unwrap();
    match RunConfig::load(Some(&dup), &[]) {
        Err(Error::Config { line, .. }) => assert_eq!(line, 4),
        other => panic!("{other:?}"),
    }

    let bad = dir.path().join("bad.cfg");
    std::fs::write(&bad, "epochs = 3\nlearning_rate = 0.1\n").unwrap();
    match RunConfig::load(Some(&bad), &[]) {
        Err(Error::Config { line, .. }) => assert_eq!(line, 2),
        other => panic!("{other:?}"),
    }

    let ok = dir.path().join("ok.cfg");
    std::fs::write(&ok, "lr = 0.005\n").unwrap();
    let cfg = RunConfig::load(Some(&ok), &[("lr".into(), "0.025".into())]).unwrap();
    assert_eq!(cfg.lr, 0.025);
    assert!(cfg.render().contains("lr = 0.025\n"));
}

/// Desk space, 50 epochs, 5 seeds: bi-level collapses onto non-learnable
/// ops, single-level does not.
#[test]
fn desk_collapse_pair() {
    let dir = tempfile::tempdir().unwrap();
    let recipe = Recipe::standard(RecipeName::CollapseRepro, &RunConfig::default());
    let s = run_experiment(&recipe, dir.path(), &ExperimentOptions::default()).unwrap();
    assert!(s.passed(), "{}", s.to_markdown());
    let (runs, rows) = recompute(&recipe, dir.path(), None, &[]).unwrap();
    assert_eq!((runs, rows), (s.runs.clone(), s.rows.clone()));

    let spec = NetConfig::desk_nas201().spec;
    let edges = spec.num_edges();
    let crossings = |label: &str| -> Vec<usize> {
        recipe
            .seeds
            .iter()
            .map(|&seed| {
                let trace = read_trace_csv(&run_dir(dir.path(), label, seed).join("trace.csv")).unwrap();
                collapse_detector(&trace, &spec, None, None).crossings()
            })
            .collect()
    };
    let bi = crossings("bilevel");
    let single = crossings("single_level");
    let n = recipe.seeds.len();
    // No desk oracle exists, so every edge counts as one the oracle would
    // keep learnable.
    assert!(bi.iter().filter(|&&c| 2 * c > edges).count() * 2 > n, "bi-level {bi:?}");
    assert!(single.iter().filter(|&&c| c == 0).count() * 2 > n, "single-level {single:?}");
}
