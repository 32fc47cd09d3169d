use std::path::Path;
use std::process::{Command, Output};

fn dartslab(args: &[&str], out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dartslab"))
        .args(args)
        .arg("--out")
        .arg(out)
        .output()
        .unwrap()
}

fn config_txt(out: &Path) -> String {
    std::fs::read_to_string(out.join("config.txt")).unwrap()
}

#[test]
fn search_echoes_flags_over_sets_over_file() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    std::fs::write(&cfg, "space = micro\nepochs = 1\nlr = 0.005\nn_train = 128\n").unwrap();
    let out = dir.path().join("run");
    let o = dartslab(
        &["search", "--config", cfg.to_str().unwrap(), "--set", "lr=0.01", "--set", "seed=4", "--lr", "0.025"],
        &out,
    );
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let echoed = config_txt(&out);
    assert!(echoed.contains("lr = 0.025\n"), "{echoed}");
    assert!(echoed.contains("seed = 4\n"), "{echoed}");
    assert!(echoed.contains("epochs = 1\n"), "{echoed}");
    assert!(out.join("trace.csv").is_file());
    assert!(out.join("summary.json").is_file());
    assert!(String::from_utf8_lossy(&o.stdout).starts_with("architecture "));
}

#[test]
fn echoed_config_reruns_to_identical_trace() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let o = dartslab(&["search", "--space", "micro", "--epochs", "1", "--set", "n_train=128"], &a);
    assert_eq!(o.status.code(), Some(0));
    let o = dartslab(&["search", "--config", a.join("config.txt").to_str().unwrap()], &b);
    assert_eq!(o.status.code(), Some(0));
    assert_eq!(std::fs::read(a.join("trace.csv")).unwrap(), std::fs::read(b.join("trace.csv")).unwrap());
}

#[test]
fn bad_input_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("x");
    let o = dartslab(&["search", "--set", "learning_rate=0.1"], &out);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("learning_rate"));
    let o = dartslab(&["oracle", "--space", "nas201-desk"], &out);
    assert_eq!(o.status.code(), Some(2));
    let o = dartslab(&["experiment", "no_such_recipe"], &out);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("collapse_repro"));
}

#[test]
fn theorems_report_each_check() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("t");
    let o = dartslab(&["theorems"], &out);
    let stdout = String::from_utf8_lossy(&o.stdout);
    assert!(out.join("theory.json").is_file());
    assert!(stdout.lines().all(|l| l.starts_with("PASS ") || l.starts_with("FAIL ")), "{stdout}");
    assert!(stdout.contains("FAIL gap_expansion"), "{stdout}");
    assert_eq!(o.status.code(), Some(1));
}
