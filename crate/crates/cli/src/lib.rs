//! Experiment runner for the `rngd` library: `run`, `verify` and `compare`.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod experiment;

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use thiserror::Error;

use config::RawConfig;
use rngd::verify::{reports_csv, run_suite, summary, Suite};

/// Environment variable giving the default worker-thread count.
pub const THREADS_ENV: &str = "RNGD_THREADS";

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    /// Failure while loading data or building a problem.
    #[error(transparent)]
    Setup(rngd::Error),
    /// Failure while an algorithm was running.
    #[error("run failed: {0}")]
    Run(rngd::Error),
    #[error("{0}")]
    ChecksFailed(String),
}

impl CliError {
    /// 2 for usage, configuration and data problems; 1 for failed checks and runs.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) | CliError::Setup(_) => 2,
            CliError::Run(_) | CliError::ChecksFailed(_) => 1,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "rngd", version, about = "Riemannian natural gradient experiments and checks")]
pub struct Cli {
    /// Worker threads (default: $RNGD_THREADS, else all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run one algorithm and write its per-epoch log.
    Run(RunArgs),
    /// Run verification checks.
    Verify(VerifyArgs),
    /// Run several configurations on the same data and merge their traces.
    Compare(CompareArgs),
}

/// Flags that override configuration keys.
#[derive(Debug, Default, Args)]
pub struct Overrides {
    /// Override any configuration key (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// lrmc | subspace | nnbn
    #[arg(long)]
    pub problem: Option<String>,
    /// Synthetic instance, e.g. `n=60,N=200,p=4,obs=0.3,snr=20`.
    #[arg(long)]
    pub synthetic: Option<String>,
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// csv | movielens | jester | msl
    #[arg(long)]
    pub format: Option<String>,
    #[arg(long)]
    pub p: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Bypass the ratio test and always step to R(t·d).
    #[arg(long, value_name = "T")]
    pub fixed_step: Option<f64>,
}

impl Overrides {
    fn apply(&self, raw: &mut RawConfig) -> Result<(), CliError> {
        for pair in &self.set {
            raw.set_pair(pair)?;
        }
        let flags = [
            ("problem", self.problem.clone()),
            ("synthetic", self.synthetic.clone()),
            ("dataset", self.dataset.as_ref().map(|p| p.display().to_string())),
            ("format", self.format.clone()),
            ("p", self.p.map(|v| v.to_string())),
            ("epochs", self.epochs.map(|v| v.to_string())),
            ("seed", self.seed.map(|v| v.to_string())),
            ("fixed_step", self.fixed_step.map(|v| v.to_string())),
        ];
        for (k, v) in flags {
            if let Some(v) = v {
                raw.set(k, &v)?;
            }
        }
        Ok(())
    }
}

#[derive(Debug, Args)]
pub struct RunArgs {
    /// Flat `key = value` configuration file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// rngd | rsgd | rsvrg | rcg | rgd | det-rngd
    #[arg(long)]
    pub algo: Option<String>,
    /// Run log path.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub overrides: Overrides,
}

#[derive(Debug, Args)]
pub struct VerifyArgs {
    /// geometry | gradients | fisher | kl | beta | stability | rates | all
    #[arg(long, default_value = "all")]
    pub suite: String,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Report CSV path (default: stdout).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct CompareArgs {
    /// Configuration files, one per run (repeatable).
    #[arg(long = "config")]
    pub configs: Vec<PathBuf>,
    /// Comma-separated algorithms sharing one configuration.
    #[arg(long, value_delimiter = ',')]
    pub algos: Vec<String>,
    /// Merged CSV path; per-run logs go next to it.
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub overrides: Overrides,
}

/// Default thread count from the flag or the environment.
pub fn thread_count(flag: Option<usize>) -> Result<Option<usize>, CliError> {
    if let Some(n) = flag {
        return if n == 0 { Err(CliError::Usage("--threads must be at least 1".into())) } else { Ok(Some(n)) };
    }
    match std::env::var(THREADS_ENV) {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(Some(n)),
            _ => Err(CliError::Usage(format!("{THREADS_ENV} must be a positive integer, got '{v}'"))),
        },
        Err(_) => Ok(None),
    }
}

pub fn dispatch(cli: Cli) -> Result<(), CliError> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = thread_count(cli.threads)? {
        builder = builder.num_threads(n);
    }
    let pool = builder.build().map_err(|e| CliError::Usage(format!("cannot start thread pool: {e}")))?;
    pool.install(|| match cli.command {
        Command::Run(a) => cmd_run(&a),
        Command::Verify(a) => cmd_verify(&a),
        Command::Compare(a) => cmd_compare(&a),
    })
}

fn load_raw(config: Option<&Path>) -> Result<RawConfig, CliError> {
    let mut raw = RawConfig::default();
    if let Some(path) = config {
        raw.merge_file(path)?;
    }
    Ok(raw)
}

pub fn cmd_run(a: &RunArgs) -> Result<(), CliError> {
    let mut raw = load_raw(a.config.as_deref())?;
    a.overrides.apply(&mut raw)?;
    if let Some(algo) = &a.algo {
        raw.set("algo", algo)?;
    }
    if let Some(out) = &a.out {
        raw.set("out", &out.display().to_string())?;
    }
    let cfg = raw.resolve()?;
    let prep = experiment::prepare(&cfg)?;
    let trace = experiment::execute(&cfg, &prep, &cfg.out)?;
    match trace.last() {
        Some(r) => {
            let test = r.test.map(|t| format!("{t:e}")).unwrap_or_else(|| "n/a".into());
            println!("{} epoch {}: train {:e} test {test}", cfg.name, r.epoch, r.train);
        }
        None => println!("{}: no records (zero epochs or already at the floor)", cfg.name),
    }
    Ok(())
}

pub fn cmd_verify(a: &VerifyArgs) -> Result<(), CliError> {
    let suite: Suite = a.suite.parse().map_err(|e: rngd::Error| CliError::Usage(e.to_string()))?;
    let reports = run_suite(suite, a.seed).map_err(CliError::Run)?;
    let csv = reports_csv(&reports);
    match &a.out {
        Some(path) => rngd::data::write_atomic(path, csv.as_bytes()).map_err(CliError::Setup)?,
        None => print!("{csv}"),
    }
    let text = summary(&reports);
    eprint!("{text}");
    if reports.iter().all(|r| r.passed()) {
        Ok(())
    } else {
        let failed: Vec<&str> = reports.iter().filter(|r| !r.passed()).map(|r| r.check.as_str()).collect();
        Err(CliError::ChecksFailed(format!("checks not passed: {}", failed.join(", "))))
    }
}

pub fn cmd_compare(a: &CompareArgs) -> Result<(), CliError> {
    let mut cfgs = Vec::new();
    match (a.configs.is_empty(), a.algos.is_empty()) {
        (false, false) if a.configs.len() > 1 => {
            return Err(CliError::Usage("--algos takes at most one --config as the shared base".into()))
        }
        (_, false) => {
            for algo in &a.algos {
                let mut raw = load_raw(a.configs.first().map(PathBuf::as_path))?;
                a.overrides.apply(&mut raw)?;
                raw.set("algo", algo)?;
                raw.set("name", algo)?;
                cfgs.push(raw.resolve()?);
            }
        }
        (false, true) => {
            for path in &a.configs {
                let mut raw = load_raw(Some(path))?;
                a.overrides.apply(&mut raw)?;
                cfgs.push(raw.resolve()?);
            }
        }
        (true, true) => return Err(CliError::Usage("compare needs --config files or --algos".into())),
    }
    let logs = experiment::compare(&cfgs, &a.out)?;
    println!("merged {} runs into {}", logs.len(), a.out.display());
    Ok(())
}
