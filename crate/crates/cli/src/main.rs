use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use herdquad_core::harness::{self, Experiment, ExperimentConfig, FIXTURES};
use herdquad_core::Error;

#[derive(Parser, Debug)]
#[command(name = "herdquad", version, about = "Greedy kernel quadrature experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Gaussian-mixture target: selection traces per method and seed.
    Mixture(RunArgs),
    /// Fisher-kernel data summarization against random subsets.
    Summarize(RunArgs),
    /// Theory checks on constructed fixtures.
    Diagnose {
        #[command(flatten)]
        run: RunArgs,
        /// Print the fixture names and exit.
        #[arg(long)]
        list: bool,
    },
}

#[derive(Args, Debug)]
struct RunArgs {
    /// Flat key = value config file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Budget; summarize also takes a comma-separated list.
    #[arg(long)]
    k: Option<String>,
    #[arg(long)]
    workers: Option<usize>,
    /// Method or comma-separated methods: wkh, sbq, kh, mc.
    #[arg(long)]
    method: Option<String>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    threads: Option<usize>,
}

enum Failure {
    Config(anyhow::Error),
    Run(anyhow::Error),
}

fn load(experiment: Experiment, args: &RunArgs) -> Result<ExperimentConfig, Failure> {
    let mut cfg = match &args.config {
        Some(path) => ExperimentConfig::load(path, experiment)
            .with_context(|| format!("reading config {}", path.display()))
            .map_err(Failure::Config)?,
        None if experiment == Experiment::Diagnose => ExperimentConfig::defaults(experiment),
        None => return Err(Failure::Config(anyhow::anyhow!("--config <file> is required for `{experiment}`"))),
    };
    cfg.apply_env().map_err(|e| Failure::Config(e.into()))?;
    let overrides = [
        ("seeds", args.seed.map(|s| s.to_string())),
        ("k", args.k.clone()),
        ("workers", args.workers.map(|w| w.to_string())),
        ("methods", args.method.clone()),
        ("out", args.out.as_ref().map(|p| p.display().to_string())),
        ("threads", args.threads.map(|t| t.to_string())),
    ];
    for (key, value) in overrides {
        if let Some(v) = value {
            cfg.set(key, &v).with_context(|| format!("--{key}")).map_err(Failure::Config)?;
        }
    }
    cfg.validate().map_err(|e| Failure::Config(e.into()))?;
    Ok(cfg)
}

fn execute(experiment: Experiment, args: &RunArgs) -> Result<bool, Failure> {
    let cfg = load(experiment, args)?;
    if let Some(t) = cfg.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(t)
            .build_global()
            .context("configuring worker threads")
            .map_err(Failure::Run)?;
    }
    log::info!("running {experiment} into {}", cfg.out.display());
    let outcome = harness::run(&cfg).map_err(|e| match e {
        Error::Config(_) | Error::Parse { .. } => Failure::Config(e.into()),
        e => Failure::Run(e.into()),
    })?;
    for f in &outcome.files {
        println!("{}", f.display());
    }
    Ok(outcome.passed)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Mixture(args) => execute(Experiment::Mixture, args),
        Command::Summarize(args) => execute(Experiment::Summarize, args),
        Command::Diagnose { list: true, .. } => {
            for name in FIXTURES {
                println!("{name}");
            }
            Ok(true)
        }
        Command::Diagnose { run, .. } => execute(Experiment::Diagnose, run),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("herdquad: one or more checks failed");
            ExitCode::from(1)
        }
        Err(Failure::Config(e)) => {
            eprintln!("herdquad: {e:#}");
            ExitCode::from(2)
        }
        Err(Failure::Run(e)) => {
            eprintln!("herdquad: {e:#}");
            ExitCode::from(1)
        }
    }
}
