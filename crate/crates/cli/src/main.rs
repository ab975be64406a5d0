use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::{info, warn};

use coretune::oracle::{self, Suite};
use coretune::tuner::{self, ExperimentConfig, TuneError};
use coretune::TraceEvent;

#[derive(Parser)]
#[command(name = "coretune", version, about = "Hyperparameter tuning on gradient-matched coresets")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Tune one strategy and write report.json, trials.csv and trace.jsonl.
    Tune(RunArgs),
    /// Tune every strategy/fraction pair of the config's compare block and write scatter.csv.
    Compare(RunArgs),
    /// Check the solvers and schedulers against brute-force references.
    Oracle(OracleArgs),
    /// Re-read the artifacts of a run directory and summarize them.
    Report {
        #[arg(long)]
        dir: PathBuf,
    },
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long, default_value = "runs/latest")]
    out: PathBuf,
    /// Dotted-path override, e.g. `strategy.fraction=0.3`. Repeatable; last one wins.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long)]
    workers: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct OracleArgs {
    /// Run a single suite (omp, nnls, hyperband, asha, gradient).
    #[arg(long)]
    suite: Option<Suite>,
    #[arg(long)]
    instances: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

const EXIT_ORACLE: u8 = 1;
const EXIT_CONFIG: u8 = 2;
const EXIT_RUNTIME: u8 = 3;

fn exit_code(e: &TuneError) -> u8 {
    if e.is_config_error() {
        EXIT_CONFIG
    } else {
        EXIT_RUNTIME
    }
}

impl RunArgs {
    fn load(&self) -> Result<ExperimentConfig, TuneError> {
        if !self.config.is_file() {
            return Err(TuneError::Config(format!("config file {} not found", self.config.display())));
        }
        let mut overrides = self.overrides.clone();
        if let Some(w) = self.workers {
            overrides.push(format!("workers={w}"));
        }
        if let Some(s) = self.seed {
            overrides.push(format!("seed={s}"));
        }
        ExperimentConfig::load(&self.config, &overrides).map_err(|e| match e {
            TuneError::Io { path, source } => TuneError::Config(format!("{}: {source}", path.display())),
            TuneError::Format { path, msg } => TuneError::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }
}

fn cmd_tune(args: &RunArgs) -> Result<(), TuneError> {
    let cfg = args.load()?;
    let outcome = tuner::tune(&cfg)?;
    tuner::write_outcome(&args.out, &outcome)?;
    let r = &outcome.report;
    println!(
        "{} f={} best_trial={} val={:.4} test_acc={:.4} cost={} makespan={} out={}",
        r.strategy.name(),
        r.fraction,
        r.best_trial,
        r.best_score,
        r.final_test_accuracy,
        r.cost.total,
        r.makespan,
        args.out.display()
    );
    Ok(())
}

fn cmd_compare(args: &RunArgs) -> Result<(), TuneError> {
    let cfg = args.load()?;
    let cmp = cfg
        .compare
        .clone()
        .ok_or_else(|| TuneError::Config("config has no compare block".into()))?;
    let data = tuner::load_data(&cfg.dataset, cfg.seed)?;
    let outcomes = tuner::compare_strategies(&cfg, &data, &cmp.strategies, &cmp.fractions.values())?;
    fs::create_dir_all(&args.out).map_err(|source| TuneError::Io { path: args.out.clone(), source })?;
    for o in &outcomes {
        let name = format!("{}-{}", o.report.strategy.name(), o.report.fraction);
        tuner::write_outcome(&args.out.join(name), o)?;
    }
    let rows = tuner::scatter_rows(&outcomes);
    tuner::write_scatter_csv(&args.out.join("scatter.csv"), &rows)?;
    let violations = tuner::ordering_violations(&rows);
    for (s, small, large) in &violations {
        warn!("{}: fraction {small} is not faster than {large}", s.name());
    }
    println!("compare rows={} ordering_violations={} out={}", rows.len(), violations.len(), args.out.display());
    Ok(())
}

fn cmd_oracle(args: &OracleArgs) -> u8 {
    let suites: Vec<Suite> = match args.suite {
        Some(s) => vec![s],
        None => Suite::ALL.to_vec(),
    };
    let mut failed = 0;
    for s in suites {
        let rep = oracle::run_suite(s, args.instances, args.seed);
        for f in rep.failures.iter().take(5) {
            eprintln!("{s}: {f}");
        }
        println!(
            "{} {} instances={} passed={} max_error={:.3e} fingerprint={:016x}",
            if rep.ok() { "PASS" } else { "FAIL" },
            s,
            rep.instances,
            rep.passed,
            rep.max_error,
            rep.fingerprint
        );
        if !rep.ok() {
            failed += 1;
        }
    }
    if failed > 0 {
        EXIT_ORACLE
    } else {
        0
    }
}

fn cmd_report(dir: &Path) -> Result<(), TuneError> {
    let report = tuner::read_report(&dir.join("report.json"))?;
    let trials = tuner::read_trials_csv(&dir.join("trials.csv"))?;
    let trace: Vec<TraceEvent> = tuner::read_jsonl(&dir.join("trace.jsonl"))?;
    info!("{}: {} trials, {} trace events", dir.display(), trials.len(), trace.len());
    let scatter = dir.join("scatter.csv");
    let extra = if scatter.exists() {
        format!(" scatter_rows={}", tuner::read_scatter_csv(&scatter)?.len())
    } else {
        String::new()
    };
    println!(
        "{} f={} trials={} events={} best_trial={} test_acc={:.4} cost={}{extra}",
        report.strategy.name(),
        report.fraction,
        trials.len(),
        trace.len(),
        report.best_trial,
        report.final_test_accuracy,
        report.cost.total
    );
    Ok(())
}

fn report_error(e: &TuneError) -> ExitCode {
    eprintln!("error: {e}");
    ExitCode::from(exit_code(e))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("CORETUNE_LOG", "warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let res = match &cli.command {
        Command::Tune(a) => cmd_tune(a),
        Command::Compare(a) => cmd_compare(a),
        Command::Oracle(a) => return ExitCode::from(cmd_oracle(a)),
        Command::Report { dir } => cmd_report(dir),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => report_error(&e),
    }
}
