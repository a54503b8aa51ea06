use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use dmea::harness::config::{load_or_pretrain, Method, RunConfig};
use dmea::harness::lifelong::{run_lifelong, standalone_scores};
use dmea::harness::report::{report, write_run, write_standalone, RunSummary, StandaloneFile};
use dmea::harness::run_parallel;
use dmea::harness::selftest::run_selftest;
use dmea::taskgen::{export_suite, make_suite, SuiteKind};
use dmea::{DmeaError, Result};

#[derive(Parser)]
#[command(name = "dmea", version, about = "Lifelong sequence generation with dynamic module expansion")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    #[arg(long, value_parser = parse_suite)]
    suite: SuiteKind,
    /// Random seed; repeat or comma-separate for several runs.
    #[arg(long = "seed", value_delimiter = ',', default_values_t = [0u64])]
    seeds: Vec<u64>,
    /// JSON configuration file; omitted sections keep their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Run one or more methods over a task order.
    Run {
        #[command(flatten)]
        common: Common,
        /// Task order index (1-based).
        #[arg(long, default_value_t = 1)]
        order: usize,
        /// Method name; repeat or comma-separate for several.
        #[arg(long = "method", value_delimiter = ',', default_values_t = [Method::Dmea], value_parser = parse_method)]
        methods: Vec<Method>,
        /// Also train every task alone so forward transfer can be reported.
        #[arg(long)]
        with_standalone: bool,
    },
    /// Train every task of a suite in isolation.
    Standalone {
        #[command(flatten)]
        common: Common,
    },
    /// Aggregate finished runs into CSV, JSON and plots.
    Report {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write a suite's samples as JSON lines.
    Export {
        #[arg(long, value_parser = parse_suite)]
        suite: SuiteKind,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1)]
        order: usize,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the built-in invariant checks.
    Selftest,
}

fn parse_suite(s: &str) -> std::result::Result<SuiteKind, String> {
    s.parse().map_err(|e: DmeaError| e.to_string())
}

fn parse_method(s: &str) -> std::result::Result<Method, String> {
    s.parse().map_err(|e: DmeaError| e.to_string())
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p),
        None => Ok(RunConfig::default()),
    }
}

fn run(common: &Common, order: usize, methods: &[Method], with_standalone: bool) -> Result<()> {
    let cfg = load_config(common.config.as_deref())?;
    let backbone = load_or_pretrain(&cfg.backbone, &cfg.harness)?;
    let mut jobs = Vec::new();
    for &seed in &common.seeds {
        for &method in methods {
            jobs.push((seed, method));
        }
    }
    let outcomes = run_parallel(jobs, |(seed, method)| -> Result<String> {
        let suite = make_suite(common.suite, seed, &cfg.taskgen);
        let task_order = suite.order(order)?;
        let run = run_lifelong(&backbone, &suite, &task_order, method, &cfg, seed)?;
        let standalone = if with_standalone {
            Some(standalone_scores(&backbone, &suite, &cfg, seed)?)
        } else {
            None
        };
        let summary = RunSummary::from_run(&run, common.suite, standalone.as_ref())?;
        let dir = common
            .out
            .join(common.suite.as_str())
            .join(method.as_str())
            .join(format!("order{order}-seed{seed}"));
        write_run(&dir, &run, &summary)?;
        Ok(format!(
            "{method} seed {seed}: final average {:.2}, {:.0}s -> {}",
            summary.final_average,
            summary.seconds,
            dir.display()
        ))
    });
    let mut failed = None;
    for o in outcomes {
        match o {
            Ok(line) => println!("{line}"),
            Err(e) => {
                eprintln!("error: {e}");
                failed = Some(e);
            }
        }
    }
    failed.map_or(Ok(()), Err)
}

fn standalone(common: &Common) -> Result<()> {
    let cfg = load_config(common.config.as_deref())?;
    let backbone = load_or_pretrain(&cfg.backbone, &cfg.harness)?;
    let outcomes = run_parallel(common.seeds.clone(), |seed| -> Result<()> {
        let suite = make_suite(common.suite, seed, &cfg.taskgen);
        let scores = standalone_scores(&backbone, &suite, &cfg, seed)?;
        let dir = common
            .out
            .join(common.suite.as_str())
            .join("standalone")
            .join(format!("seed{seed}"));
        write_standalone(&dir, &StandaloneFile::new(common.suite, seed, &scores))?;
        for (task, score) in &scores {
            println!("seed {seed} {task}: {score:.1}");
        }
        Ok(())
    });
    outcomes.into_iter().collect()
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Run {
            common,
            order,
            methods,
            with_standalone,
        } => run(common, *order, methods, *with_standalone),
        Command::Standalone { common } => standalone(common),
        Command::Report { input, out } => report(input, out).map(|rep| {
            for g in &rep.groups {
                println!(
                    "{:8} {:18} final average {:6.2} ± {:5.2} (n={})",
                    g.suite.as_str(),
                    g.method,
                    g.final_average.mean,
                    g.final_average.std,
                    g.final_average.n
                );
            }
        }),
        Command::Export {
            suite,
            seed,
            order,
            config,
            out,
        } => load_config(config.as_deref()).and_then(|cfg| {
            let s = make_suite(*suite, *seed, &cfg.taskgen);
            export_suite(&s, &s.order(*order)?, out)
        }),
        Command::Selftest => {
            let checks = run_selftest();
            for c in &checks {
                println!("{} {} ({})", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
            }
            if checks.iter().all(|c| c.passed) {
                Ok(())
            } else {
                Err(DmeaError::OracleFailure("selftest failed".into()))
            }
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
