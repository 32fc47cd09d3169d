use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use dartslab::config::{parse_override, RunConfig, Space};
use dartslab::data::generate;
use dartslab::diagnostics::{correlation_separation, emit_traces, write_json};
use dartslab::experiments::{run_experiment, ExperimentOptions, Recipe, RecipeName};
use dartslab::oracle::{load_or_evaluate, OracleConfig};
use dartslab::search::run_search;
use dartslab::theory::run_theory_suite;

#[derive(Parser)]
#[command(name = "dartslab", version, about = "Differentiable architecture search dynamics lab")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one architecture search and write its trace.
    Search(Common),
    /// Train every architecture of the micro space and rank them.
    Oracle(Common),
    /// Run the numeric checks of the softmax-competition results.
    Theorems(Common),
    /// Run a named experiment recipe.
    Experiment {
        /// One of collapse_repro, ablation_batch, ablation_lr,
        /// ablation_activation, ablation_optimizer, correlation_study,
        /// theorem_suite, oracle_study.
        name: String,
        #[command(flatten)]
        common: Common,
        /// Oracle table cache directory (default <out>/oracle).
        #[arg(long)]
        oracle_dir: Option<PathBuf>,
    },
    /// Gradient diagnostics.
    Diag {
        #[command(subcommand)]
        which: Diag,
    },
}

#[derive(Subcommand)]
enum Diag {
    /// Search, then compare same-batch and cross-batch gradient correlation.
    Corr {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 200)]
        pairs: usize,
    },
}

#[derive(Args)]
struct Common {
    /// key = value configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    regime: Option<String>,
    #[arg(long)]
    activation: Option<String>,
    /// Weight learning rate.
    #[arg(long)]
    lr: Option<f64>,
    /// Optimizer of α (sgd or adam).
    #[arg(long)]
    optimizer: Option<String>,
    #[arg(long)]
    epochs: Option<usize>,
    /// nas201-desk or micro.
    #[arg(long)]
    space: Option<String>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Any configuration key, as key=value. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
}

impl Common {
    /// File, then `--set`, then the named flags.
    fn resolve(&self) -> Result<RunConfig> {
        let mut ov = Vec::new();
        for s in &self.sets {
            ov.push(parse_override(s)?);
        }
        let named = [
            ("seed", self.seed.map(|v| v.to_string())),
            ("regime", self.regime.clone()),
            ("activation", self.activation.clone()),
            ("lr", self.lr.map(|v| v.to_string())),
            ("optimizer", self.optimizer.clone()),
            ("epochs", self.epochs.map(|v| v.to_string())),
            ("space", self.space.clone()),
        ];
        for (k, v) in named {
            if let Some(v) = v {
                ov.push((k.to_string(), v));
            }
        }
        let cfg = RunConfig::load(self.config.as_deref(), &ov)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

fn echo_config(cfg: &RunConfig, out: &Path) -> Result<()> {
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    std::fs::write(out.join("config.txt"), cfg.render())
        .with_context(|| format!("writing {}", out.join("config.txt").display()))
}

fn search(c: &Common) -> Result<bool> {
    let cfg = c.resolve()?;
    echo_config(&cfg, &c.out)?;
    let task = generate(&cfg.dataset())?;
    let result = run_search(&cfg.search(cfg.seed), &task)?;
    let summary = emit_traces(&result, None, &c.out)?;
    println!("architecture {}", summary.architecture);
    println!("steps {}", summary.steps);
    if let Some(l) = summary.final_loss_train {
        println!("final train loss {l:.6}");
    }
    println!("trace {}", c.out.join("trace.csv").display());
    Ok(true)
}

fn oracle(c: &Common) -> Result<bool> {
    let cfg = c.resolve()?;
    if cfg.space != Space::Micro {
        bail!("the oracle enumerates the micro space only (got --space {})", cfg.space);
    }
    echo_config(&cfg, &c.out)?;
    let task = generate(&cfg.dataset())?;
    let ocfg = OracleConfig {
        net: cfg.net(),
        ..OracleConfig::micro()
    };
    let table = load_or_evaluate(&task, &ocfg, &c.out)?;
    let mut entries = table.ordered();
    entries.sort_by(|a, b| b.mean_val_accuracy.total_cmp(&a.mean_val_accuracy));
    println!("rank  accuracy  architecture");
    for e in entries {
        let (rank, _) = table.rank_of(&e.architecture)?;
        println!("{rank:>4}  {:.4}    {}", e.mean_val_accuracy, e.architecture.label(&table.net.spec));
    }
    let ok = table.learnability_check();
    println!("learnability check {}", if ok { "passed" } else { "failed" });
    Ok(ok)
}

fn theorems(c: &Common) -> Result<bool> {
    let cfg = c.resolve()?;
    std::fs::create_dir_all(&c.out)?;
    let report = run_theory_suite(cfg.seed)?;
    write_json(&report, &c.out.join("theory.json"))?;
    for (name, ok) in report.checks() {
        println!("{} {name}", if ok { "PASS" } else { "FAIL" });
    }
    Ok(report.passed())
}

fn experiment(name: &str, c: &Common, oracle_dir: Option<PathBuf>) -> Result<bool> {
    let name: RecipeName = name.parse()?;
    let cfg = c.resolve()?;
    let recipe = Recipe::standard(name, &cfg);
    let summary = run_experiment(&recipe, &c.out, &ExperimentOptions { oracle_dir })?;
    print!("{}", summary.to_markdown());
    Ok(summary.passed())
}

fn diag_corr(c: &Common, pairs: usize) -> Result<bool> {
    let cfg = c.resolve()?;
    echo_config(&cfg, &c.out)?;
    let task = generate(&cfg.dataset())?;
    let result = run_search(&cfg.search(cfg.seed), &task)?;
    let sep = correlation_separation(&result.net, &task.train, cfg.batch_size, pairs, cfg.seed)?;
    write_json(&sep, &c.out.join("correlation.json"))?;
    println!("cell  same-batch   |cross-batch|  ratio");
    for (i, r) in sep.ratios().iter().enumerate() {
        println!("{i:>4}  {:.4e}   {:.4e}     {r:.3}", sep.cell_same[i], sep.cell_cross[i]);
    }
    Ok(true)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match &cli.command {
        Command::Search(c) => search(c),
        Command::Oracle(c) => oracle(c),
        Command::Theorems(c) => theorems(c),
        Command::Experiment {
            name,
            common,
            oracle_dir,
        } => experiment(name, common, oracle_dir.clone()),
        Command::Diag {
            which: Diag::Corr { common, pairs },
        } => diag_corr(common, *pairs),
    };
    match outcome {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
