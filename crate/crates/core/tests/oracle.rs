use std::sync::OnceLock;

use dartslab::config::{RunConfig, Space};
use dartslab::data::{generate, linear_probe_accuracy, DatasetSpec, Task};
use dartslab::ops::OpKind;
use dartslab::oracle::{evaluate_all, evaluate_architecture, OracleConfig, OracleTable, TrainBudget};
use dartslab::search::{run_search, Regime};
use dartslab::space::Architecture;

fn default_task() -> &'static Task {
    static TASK: OnceLock<Task> = OnceLock::new();
    TASK.get_or_init(|| generate(&DatasetSpec::default()).unwrap())
}

fn default_table() -> &'static OracleTable {
    static TABLE: OnceLock<OracleTable> = OnceLock::new();
    TABLE.get_or_init(|| evaluate_all(default_task(), &OracleConfig::micro()).unwrap())
}

#[test]
fn all_zero_architecture_is_at_chance() {
    let arch = Architecture::new(vec![OpKind::Zero; 3]);
    let runs = evaluate_architecture(&arch, default_task(), &OracleConfig::micro()).unwrap();
    for r in runs {
        assert!((r.val_accuracy - 0.25).abs() <= 0.05, "{}", r.val_accuracy);
    }
}

#[test]
fn all_skip_scores_below_the_best() {
    let table = default_table();
    let skip = table.entry(&Architecture::new(vec![OpKind::Skip; 3])).unwrap();
    assert!(skip.mean_val_accuracy < table.best().mean_val_accuracy);
    assert!(table.learnability_check());
}

#[test]
fn table_is_identical_across_reruns() {
    let task = generate(&DatasetSpec {
        n_train: 256,
        n_val: 128,
        n_test: 64,
        ..DatasetSpec::default()
    })
    .unwrap();
    let cfg = OracleConfig {
        budget: TrainBudget {
            epochs: 2,
            ..TrainBudget::default()
        },
        ..OracleConfig::micro()
    };
    assert_eq!(evaluate_all(&task, &cfg).unwrap(), evaluate_all(&task, &cfg).unwrap());
}

#[test]
fn single_level_keeps_the_oracle_best_learnable_edges() {
    let table = default_table();
    let best = &table.best().architecture;
    let base = RunConfig {
        space: Space::Micro,
        regime: Regime::SingleLevel,
        ..RunConfig::default()
    };
    let mut hits = 0;
    for seed in 0..5 {
        let r = run_search(&base.search(seed), default_task()).unwrap();
        let ok = best
            .ops
            .iter()
            .zip(&r.architecture.ops)
            .all(|(b, a)| !b.is_learnable() || a.is_learnable());
        hits += ok as usize;
    }
    assert!(hits >= 4, "{hits} of 5 seeds");
}

#[test]
fn single_direction_teacher_needs_learnable_ops() {
    let task = generate(&DatasetSpec {
        directions: 1,
        ..DatasetSpec::default()
    })
    .unwrap();
    let probe = linear_probe_accuracy(&task, 30, 0.1, 0).unwrap();
    let table = evaluate_all(&task, &OracleConfig::micro()).unwrap();
    let best = table.best().mean_val_accuracy;
    assert!(probe <= 0.60, "probe {probe}");
    assert!(best >= 0.85, "oracle best {best}");
}
