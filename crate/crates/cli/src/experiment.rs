//! Building problems from configurations and running algorithms on them.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rngd::data::{
    format_float, load_jester, load_movielens, load_msl_csv, read_ratings_csv, split, split_msl, synth_lrmc, synth_msl, synth_nn,
    write_atomic, JesterOptions, MslTask, Noise, RatingDataset, RunLogWriter, RunRecord, SplitDataset,
};
use rngd::models::{BnProblem, ModelProblem, OutputModel, SubspaceLearningProblem, TwoLayerBnNet};
use rngd::models::{LrmcProblem, SampleAxis};
use rngd::optim::{deterministic_rngd_step, rcg_run_with, rngd_run_with, rsgd_run_with, rsvrg_run_with, StepSchedule, TraceRecord};
use rngd::{Manifold, UnitRowPoint};

use crate::config::{Algo, DataFormat, ExperimentConfig, Problem};
use crate::CliError;

/// A problem ready to run, with the digests recorded in the run log.
pub enum Built {
    Lrmc(LrmcProblem),
    Subspace(SubspaceLearningProblem),
    Nnbn(BnProblem, UnitRowPoint),
}

pub struct Prepared {
    pub problem: Built,
    pub dataset_checksum: u64,
    pub split_checksum: u64,
}

/// Order-sensitive FNV-1a over 64-bit words.
fn fnv(words: impl IntoIterator<Item = u64>) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for w in words {
        for b in w.to_le_bytes() {
            h ^= u64::from(b);
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
    }
    h
}

fn tasks_checksum(tasks: &[MslTask]) -> u64 {
    fnv(tasks.iter().flat_map(|t| {
        [t.x.nrows() as u64, t.x.ncols() as u64]
            .into_iter()
            .chain(t.x.iter().chain(t.y.iter()).map(|v| v.to_bits()))
            .collect::<Vec<_>>()
    }))
}

fn load_ratings(cfg: &ExperimentConfig, path: &Path) -> Result<RatingDataset, CliError> {
    let ds = match cfg.format {
        DataFormat::Csv => read_ratings_csv(path),
        DataFormat::Movielens => load_movielens(path),
        DataFormat::Jester => load_jester(path, JesterOptions { skip_leading: cfg.jester_skip }),
        DataFormat::Msl => unreachable!("format checked against the problem"),
    };
    ds.map_err(CliError::Setup)
}

pub fn prepare(cfg: &ExperimentConfig) -> Result<Prepared, CliError> {
    match cfg.problem {
        Problem::Lrmc => {
            let (train, test, dataset_checksum, split_checksum, axis) = match (&cfg.synthetic, &cfg.dataset) {
                (Some(s), _) => {
                    s.check_keys(&["n", "N", "p", "obs", "snr", "noise"])?;
                    let noise = match (s.get("snr"), s.get("noise")) {
                        (Some(_), Some(_)) => return Err(CliError::Usage("give snr or noise, not both".into())),
                        (Some(db), None) => Noise::SnrDb(db),
                        (None, Some(std)) if std > 0.0 => Noise::Std(std),
                        _ => Noise::None,
                    };
                    let syn = synth_lrmc(
                        s.count("n", 60)?,
                        s.count("N", 200)?,
                        s.count("p", cfg.p)?,
                        s.or("obs", 1.0),
                        noise,
                        cfg.seed,
                    )
                    .map_err(CliError::Setup)?;
                    let held_out = syn.held_out().map_err(CliError::Setup)?;
                    let dataset_checksum = fnv(syn.full.iter().map(|v| v.to_bits()));
                    let split_checksum = match &held_out {
                        Some(test) => SplitDataset {
                            train: syn.dataset.clone(),
                            test: test.clone(),
                            seed: cfg.seed,
                            fraction: s.or("obs", 1.0),
                        }
                        .checksum(),
                        None => syn.dataset.checksum(),
                    };
                    (syn.dataset, held_out, dataset_checksum, split_checksum, SampleAxis::Columns)
                }
                (None, Some(path)) => {
                    let ds = load_ratings(cfg, path)?;
                    let sp = split(&ds, cfg.train_fraction, cfg.seed).map_err(CliError::Setup)?;
                    let split_checksum = sp.checksum();
                    (sp.train, Some(sp.test), ds.checksum(), split_checksum, cfg.axis)
                }
                (None, None) => unreachable!("checked at resolution"),
            };
            let prob = LrmcProblem::from_ratings(&train, test.as_ref(), cfg.p, axis).map_err(CliError::Setup)?;
            Ok(Prepared { problem: Built::Lrmc(prob), dataset_checksum, split_checksum })
        }
        Problem::Subspace => {
            let tasks = match (&cfg.synthetic, &cfg.dataset) {
                (Some(s), _) => {
                    s.check_keys(&["n", "p", "tasks", "rows", "noise"])?;
                    synth_msl(
                        s.count("n", 20)?,
                        s.count("p", cfg.p)?,
                        s.count("tasks", 30)?,
                        s.count("rows", 20)?,
                        s.or("noise", 0.0),
                        cfg.seed,
                    )
                    .map_err(CliError::Setup)?
                    .tasks
                }
                (None, Some(path)) => load_msl_csv(path).map_err(CliError::Setup)?,
                (None, None) => unreachable!("checked at resolution"),
            };
            let (train, test) = split_msl(&tasks, cfg.train_fraction, cfg.seed).map_err(CliError::Setup)?;
            let split_checksum = tasks_checksum(&train) ^ tasks_checksum(&test).rotate_left(1);
            let prob = SubspaceLearningProblem::new(cfg.p, cfg.lambda, train, Some(test))
                .map_err(CliError::Setup)?
                .with_mode(cfg.msl_mode);
            Ok(Prepared { problem: Built::Subspace(prob), dataset_checksum: tasks_checksum(&tasks), split_checksum })
        }
        Problem::Nnbn => {
            let default = crate::config::SyntheticSpec::parse("").expect("empty spec");
            let s = cfg.synthetic.as_ref().unwrap_or(&default);
            s.check_keys(&["n", "N", "m"])?;
            let (n, big_n, m) = (s.count("n", 16)?, s.count("N", 10)?, s.count("m", 1024)?);
            let inst = synth_nn(n, big_n, m, cfg.seed).map_err(CliError::Setup)?;
            let net = TwoLayerBnNet::with_population_stats(inst.a.clone(), n).map_err(CliError::Setup)?;
            let checksum = fnv(inst.xs.iter().chain(inst.ys.iter()).chain(inst.theta0.matrix().iter()).map(|v| v.to_bits()));
            let prob = BnProblem::new(net, inst.xs, inst.ys).map_err(CliError::Setup)?;
            Ok(Prepared { problem: Built::Nnbn(prob, inst.theta0), dataset_checksum: checksum, split_checksum: checksum })
        }
    }
}

fn run_algo<M: ModelProblem>(
    prob: &M,
    cfg: &ExperimentConfig,
    init: Option<M::Point>,
    sink: &mut dyn FnMut(&TraceRecord) -> rngd::Result<()>,
) -> rngd::Result<Vec<TraceRecord>> {
    let out = match cfg.algo {
        Algo::Rngd => rngd_run_with(prob, &cfg.rngd, init, sink)?,
        Algo::Rsgd => rsgd_run_with(prob, &cfg.baseline, init, sink)?,
        Algo::Rgd => {
            let b = rngd::optim::BaselineConfig { batch: None, schedule: StepSchedule::Constant, ..cfg.baseline.clone() };
            rsgd_run_with(prob, &b, init, sink)?
        }
        Algo::Rsvrg => rsvrg_run_with(prob, &cfg.baseline, init, sink)?,
        Algo::Rcg => rcg_run_with(prob, &cfg.baseline, init, sink)?,
        Algo::DetRngd => unreachable!("handled separately"),
    };
    Ok(out.trace)
}

/// Pseudo-inverse natural steps with step size `t`, one record per step.
fn run_det(
    prob: &BnProblem,
    init: &UnitRowPoint,
    cfg: &ExperimentConfig,
    sink: &mut dyn FnMut(&TraceRecord) -> rngd::Result<()>,
) -> rngd::Result<Vec<TraceRecord>> {
    let mut point = init.clone();
    let mut trace = Vec::new();
    let residual0 = (prob.outputs(&point)? - prob.targets()).norm();
    if residual0 <= cfg.floor {
        return Ok(trace);
    }
    for k in 1..=cfg.rngd.max_epochs {
        let step = deterministic_rngd_step(prob, &point, cfg.baseline.step)?;
        point = step.point;
        let m = prob.metrics(&point)?;
        if !m.train.is_finite() {
            return Err(rngd::Error::Numerical(format!("non-finite metric at step {k}")));
        }
        let rec = TraceRecord { epoch: k, grad_evals_per_n: k as f64, train: m.train, test: m.test, sigma: None, accepted: k };
        sink(&rec)?;
        trace.push(rec);
        if step.residual <= cfg.floor {
            break;
        }
    }
    Ok(trace)
}

pub fn metadata(cfg: &ExperimentConfig, prep: &Prepared) -> BTreeMap<String, String> {
    let mut meta: BTreeMap<String, String> = cfg
        .resolved
        .iter()
        .filter(|(k, _)| k.as_str() != "out")
        .map(|(k, v)| (format!("config.{k}"), v.clone()))
        .collect();
    meta.insert("version".into(), format!("rngd {}", env!("CARGO_PKG_VERSION")));
    meta.insert("seed".into(), cfg.seed.to_string());
    meta.insert("dataset_checksum".into(), format!("{:016x}", prep.dataset_checksum));
    meta.insert("split_checksum".into(), format!("{:016x}", prep.split_checksum));
    meta
}

/// Runs one experiment, streaming records to the run log at `out`.
pub fn execute(cfg: &ExperimentConfig, prep: &Prepared, out: &Path) -> Result<Vec<TraceRecord>, CliError> {
    let mut writer = RunLogWriter::create(out, &metadata(cfg, prep)).map_err(CliError::Setup)?;
    let start = Instant::now();
    let mut sink = |r: &TraceRecord| {
        let rec = RunRecord { epoch: r.epoch, grad_evals_per_n: r.grad_evals_per_n, train: r.train, test: r.test, sigma: r.sigma };
        writer.append(&rec, start.elapsed().as_secs_f64())
    };
    let trace = match &prep.problem {
        Built::Lrmc(p) => run_algo(p, cfg, None, &mut sink),
        Built::Subspace(p) => run_algo(p, cfg, None, &mut sink),
        Built::Nnbn(p, theta0) if cfg.algo == Algo::DetRngd => run_det(p, theta0, cfg, &mut sink),
        Built::Nnbn(p, theta0) => run_algo(p, cfg, Some(theta0.clone()), &mut sink),
    }
    .map_err(CliError::Run)?;
    writer.finish().map_err(CliError::Setup)?;
    Ok(trace)
}

/// Runs every configuration on a shared dataset and split and writes one merged CSV.
pub fn compare(cfgs: &[ExperimentConfig], out: &Path) -> Result<Vec<PathBuf>, CliError> {
    if cfgs.len() < 2 {
        return Err(CliError::Usage("compare needs at least two configurations".into()));
    }
    let first = &cfgs[0];
    for c in &cfgs[1..] {
        if c.problem != first.problem {
            return Err(CliError::Usage(format!("cannot compare problem {} with {}", first.problem, c.problem)));
        }
        if c.dataset != first.dataset || c.synthetic != first.synthetic {
            return Err(CliError::Usage("all configurations must use the same dataset".into()));
        }
    }
    let mut names: Vec<&str> = cfgs.iter().map(|c| c.name.as_str()).collect();
    names.sort_unstable();
    if names.windows(2).any(|w| w[0] == w[1]) {
        return Err(CliError::Usage("run names must be distinct (set name=... per configuration)".into()));
    }
    let mut runs = Vec::new();
    let mut logs = Vec::new();
    let mut split_checksum = None;
    for c in cfgs {
        let prep = prepare(c)?;
        if *split_checksum.get_or_insert(prep.split_checksum) != prep.split_checksum {
            return Err(CliError::Usage(format!(
                "run '{}' sees a different train/test split; use the same seed and train_fraction",
                c.name
            )));
        }
        let log = sibling(out, &c.name);
        log::info!("running {} -> {}", c.name, log.display());
        runs.push((c.name.clone(), execute(c, &prep, &log)?));
        logs.push(log);
    }
    write_atomic(out, merge_traces(&runs).as_bytes()).map_err(CliError::Setup)?;
    Ok(logs)
}

/// `<out>` with `.<tag>.log.csv` appended.
pub fn sibling(out: &Path, tag: &str) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(format!(".{tag}.log.csv"));
    PathBuf::from(s)
}

/// `epoch,<name>_train,<name>_test,…`, one row per epoch; missing values are empty.
pub fn merge_traces(runs: &[(String, Vec<TraceRecord>)]) -> String {
    let mut text = String::from("epoch");
    for (name, _) in runs {
        text.push_str(&format!(",{name}_train,{name}_test"));
    }
    text.push('\n');
    let last = runs.iter().flat_map(|(_, t)| t.last().map(|r| r.epoch)).max().unwrap_or(0);
    let fmt = |v: Option<f64>| v.map(format_float).unwrap_or_default();
    for epoch in 1..=last {
        text.push_str(&epoch.to_string());
        for (_, trace) in runs {
            let rec = trace.iter().find(|r| r.epoch == epoch);
            text.push_str(&format!(",{},{}", fmt(rec.map(|r| r.train)), fmt(rec.and_then(|r| r.test))));
        }
        text.push('\n');
    }
    text
}
