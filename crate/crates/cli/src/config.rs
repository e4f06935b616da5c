//! Flat `key = value` experiment configuration.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rngd::fisher::{SolveMethod, SolverSettings};
use rngd::models::{GradientMode, SampleAxis};
use rngd::optim::{BaselineConfig, RngdConfig, StepSchedule};
use rngd::RetractionKind;

use crate::CliError;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Problem {
    Lrmc,
    Subspace,
    Nnbn,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Algo {
    Rngd,
    Rsgd,
    Rsvrg,
    Rcg,
    Rgd,
    DetRngd,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DataFormat {
    /// `row,col,value` lines.
    Csv,
    Movielens,
    Jester,
    /// `task,y,x1,…,xn` lines.
    Msl,
}

macro_rules! keyword_enum {
    ($ty:ident, $what:literal, $($name:literal => $variant:ident),+ $(,)?) => {
        impl FromStr for $ty {
            type Err = CliError;
            fn from_str(s: &str) -> Result<Self, CliError> {
                match s {
                    $($name => Ok($ty::$variant),)+
                    other => Err(CliError::Usage(format!(
                        concat!("unknown ", $what, " '{}' (expected one of: {})"),
                        other,
                        [$($name),+].join(", ")
                    ))),
                }
            }
        }

        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(match self { $($ty::$variant => $name,)+ })
            }
        }
    };
}

keyword_enum!(Problem, "problem", "lrmc" => Lrmc, "subspace" => Subspace, "nnbn" => Nnbn);
keyword_enum!(Algo, "algorithm", "rngd" => Rngd, "rsgd" => Rsgd, "rsvrg" => Rsvrg, "rcg" => Rcg, "rgd" => Rgd, "det-rngd" => DetRngd);
keyword_enum!(DataFormat, "dataset format", "csv" => Csv, "movielens" => Movielens, "jester" => Jester, "msl" => Msl);

/// Every recognised key with its default; `-` marks "unset".
pub const KEYS: &[(&str, &str)] = &[
    ("problem", "lrmc"),
    ("algo", "rngd"),
    ("name", "-"),
    ("synthetic", "-"),
    ("dataset", "-"),
    ("format", "-"),
    ("axis", "rows"),
    ("jester_skip", "0"),
    ("train_fraction", "0.5"),
    ("p", "-"),
    ("lambda", "0.01"),
    ("msl_mode", "exact"),
    ("epochs", "50"),
    ("seed", "0"),
    ("out", "run.csv"),
    ("sigma0", "1"),
    ("sigma_min", "0.0001"),
    ("eta1", "0.1"),
    ("eta2", "1"),
    ("gamma", "2"),
    ("grad_batch", "full"),
    ("fisher_batch", "-"),
    ("eval_batch", "-"),
    ("retraction", "polar"),
    ("solver", "factored"),
    ("cg_tol", "1e-10"),
    ("cg_maxit", "500"),
    ("grad_tol", "-"),
    ("fixed_step", "-"),
    ("step", "-"),
    ("schedule", "decaying"),
    ("batch", "full"),
    ("inner_iters", "-"),
    ("floor", "1e-12"),
];

/// Raw settings in override order.
#[derive(Clone, Debug, Default)]
pub struct RawConfig {
    values: BTreeMap<String, String>,
}

impl RawConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), CliError> {
        let key = key.trim();
        if !KEYS.iter().any(|(k, _)| *k == key) {
            return Err(CliError::Usage(format!("unknown configuration key '{key}'")));
        }
        self.values.insert(key.to_string(), value.trim().to_string());
        Ok(())
    }

    /// Parses `key=value` (as given to `--set`).
    pub fn set_pair(&mut self, pair: &str) -> Result<(), CliError> {
        let (k, v) = pair
            .split_once('=')
            .ok_or_else(|| CliError::Usage(format!("expected key=value, got '{pair}'")))?;
        self.set(k, v)
    }

    pub fn merge_file(&mut self, path: &Path) -> Result<(), CliError> {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        self.merge_text(&text)
            .map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
    }

    /// Blank lines and `#` comments are ignored.
    pub fn merge_text(&mut self, text: &str) -> Result<(), CliError> {
        for (i, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            self.set_pair(line).map_err(|e| CliError::Usage(format!("line {}: {e}", i + 1)))?;
        }
        Ok(())
    }

    fn get(&self, key: &str) -> &str {
        match self.values.get(key) {
            Some(v) => v,
            None => KEYS.iter().find(|(k, _)| *k == key).map(|(_, d)| *d).unwrap_or("-"),
        }
    }

    fn opt(&self, key: &str) -> Option<&str> {
        match self.get(key) {
            "-" | "" | "none" => None,
            v => Some(v),
        }
    }

    fn parse<T: FromStr<Err: fmt::Display>>(&self, key: &str) -> Result<T, CliError> {
        let v = self.get(key);
        v.parse().map_err(|e| CliError::Usage(format!("invalid value '{v}' for {key}: {e}")))
    }

    fn parse_opt<T: FromStr<Err: fmt::Display>>(&self, key: &str) -> Result<Option<T>, CliError> {
        self.opt(key)
            .map(|v| v.parse().map_err(|e| CliError::Usage(format!("invalid value '{v}' for {key}: {e}"))))
            .transpose()
    }

    /// `full` means the whole dataset.
    fn batch(&self, key: &str) -> Result<Option<usize>, CliError> {
        match self.opt(key) {
            None | Some("full") => Ok(None),
            Some(_) => self.parse_opt(key),
        }
    }

    pub fn resolve(&self) -> Result<ExperimentConfig, CliError> {
        let problem: Problem = self.parse("problem")?;
        let algo: Algo = self.parse("algo")?;
        let synthetic = self.opt("synthetic").map(SyntheticSpec::parse).transpose()?;
        let dataset = self.opt("dataset").map(PathBuf::from);
        match (&synthetic, &dataset) {
            (Some(_), Some(_)) => return Err(CliError::Usage("give either a synthetic spec or a dataset, not both".into())),
            (None, None) if problem != Problem::Nnbn => {
                return Err(CliError::Usage("a dataset path or a synthetic spec is required".into()))
            }
            _ => {}
        }
        if let Some(path) = &dataset {
            if !path.exists() {
                return Err(CliError::Usage(format!("dataset {} does not exist", path.display())));
            }
        }
        if algo == Algo::DetRngd && problem != Problem::Nnbn {
            return Err(CliError::Usage("det-rngd needs an output model; only the nnbn problem provides one".into()));
        }
        if problem == Problem::Nnbn && dataset.is_some() {
            return Err(CliError::Usage("the nnbn problem is synthetic only".into()));
        }
        let format = match self.opt("format") {
            Some(f) => f.parse()?,
            None if problem == Problem::Subspace => DataFormat::Msl,
            None => DataFormat::Csv,
        };
        if (problem == Problem::Subspace) != (format == DataFormat::Msl) && dataset.is_some() {
            return Err(CliError::Usage(format!("format {format} does not fit problem {problem}")));
        }
        let axis = match self.get("axis") {
            "rows" => SampleAxis::Rows,
            "columns" => SampleAxis::Columns,
            other => return Err(CliError::Usage(format!("unknown axis '{other}' (rows or columns)"))),
        };
        let msl_mode = match self.get("msl_mode") {
            "exact" => GradientMode::Exact,
            "approximate" => GradientMode::Approximate,
            other => return Err(CliError::Usage(format!("unknown msl_mode '{other}'"))),
        };
        let retraction: RetractionKind = self.get("retraction").parse().map_err(|e: rngd::Error| CliError::Usage(e.to_string()))?;
        let method = match self.get("solver") {
            "factored" => SolveMethod::Factored,
            "cg" => SolveMethod::Cg,
            other => return Err(CliError::Usage(format!("unknown solver '{other}' (factored or cg)"))),
        };
        let schedule = match self.get("schedule") {
            "decaying" => StepSchedule::Decaying,
            "constant" => StepSchedule::Constant,
            other => return Err(CliError::Usage(format!("unknown schedule '{other}'"))),
        };
        let p = match self.parse_opt::<usize>("p")? {
            Some(p) => p,
            None => match (problem, &synthetic) {
                (_, Some(s)) => s.get("p").map(|v| v as usize).unwrap_or(6),
                _ => 6,
            },
        };
        let train_fraction: f64 = self.parse("train_fraction")?;
        if !(train_fraction > 0.0 && train_fraction < 1.0) {
            return Err(CliError::Usage(format!("train_fraction must lie in (0,1), got {train_fraction}")));
        }
        let epochs: usize = self.parse("epochs")?;
        let seed: u64 = self.parse("seed")?;
        let step = match self.parse_opt::<f64>("step")? {
            Some(s) => s,
            None if algo == Algo::DetRngd => 1.0,
            None => 0.1,
        };
        let rngd = RngdConfig {
            sigma0: self.parse("sigma0")?,
            sigma_min: self.parse("sigma_min")?,
            eta1: self.parse("eta1")?,
            eta2: self.parse("eta2")?,
            gamma: self.parse("gamma")?,
            grad_batch: self.batch("grad_batch")?,
            fisher_batch: self.batch("fisher_batch")?,
            eval_batch: self.batch("eval_batch")?,
            retraction,
            solver: SolverSettings { method, cg_tol: self.parse("cg_tol")?, cg_maxit: self.parse("cg_maxit")? },
            max_epochs: epochs,
            grad_tol: self.parse_opt("grad_tol")?,
            fixed_step: self.parse_opt("fixed_step")?,
            seed,
        };
        rngd.validate().map_err(|e| CliError::Usage(e.to_string()))?;
        let baseline = BaselineConfig {
            step,
            schedule,
            batch: self.batch("batch")?,
            retraction,
            max_epochs: epochs,
            seed,
            inner_iters: self.parse_opt("inner_iters")?,
        };
        let lambda: f64 = self.parse("lambda")?;
        if !(lambda > 0.0) {
            return Err(CliError::Usage(format!("lambda must be positive, got {lambda}")));
        }
        let name = self.opt("name").map(str::to_string).unwrap_or_else(|| algo.to_string());
        if name.is_empty() || name.contains([',', '\n']) {
            return Err(CliError::Usage(format!("invalid run name '{name}'")));
        }
        let resolved = KEYS
            .iter()
            .map(|(k, _)| {
                let v = match *k {
                    "p" => p.to_string(),
                    "format" => format.to_string(),
                    "step" => step.to_string(),
                    "name" => name.clone(),
                    _ => self.get(k).to_string(),
                };
                (k.to_string(), v)
            })
            .collect();
        Ok(ExperimentConfig {
            problem,
            algo,
            name,
            synthetic,
            dataset,
            format,
            axis,
            jester_skip: self.parse("jester_skip")?,
            train_fraction,
            p,
            lambda,
            msl_mode,
            seed,
            out: PathBuf::from(self.get("out")),
            rngd,
            baseline,
            floor: self.parse("floor")?,
            resolved,
        })
    }
}

/// `key=value` pairs separated by commas, e.g. `n=60,N=200,p=4,obs=0.3,snr=20`.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSpec {
    values: BTreeMap<String, f64>,
}

impl SyntheticSpec {
    pub fn parse(s: &str) -> Result<Self, CliError> {
        let mut values = BTreeMap::new();
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let (k, v) = part
                .split_once('=')
                .ok_or_else(|| CliError::Usage(format!("synthetic spec entry '{part}' is not key=value")))?;
            let v: f64 = v
                .trim()
                .parse()
                .map_err(|_| CliError::Usage(format!("synthetic spec value '{v}' is not a number")))?;
            values.insert(k.trim().to_string(), v);
        }
        Ok(Self { values })
    }

    pub fn get(&self, key: &str) -> Option<f64> {
        self.values.get(key).copied()
    }

    pub fn or(&self, key: &str, default: f64) -> f64 {
        self.get(key).unwrap_or(default)
    }

    /// A non-negative integer entry.
    pub fn count(&self, key: &str, default: usize) -> Result<usize, CliError> {
        let v = self.or(key, default as f64);
        if v < 0.0 || v.fract() != 0.0 {
            return Err(CliError::Usage(format!("synthetic spec '{key}' must be a non-negative integer, got {v}")));
        }
        Ok(v as usize)
    }

    pub fn check_keys(&self, allowed: &[&str]) -> Result<(), CliError> {
        match self.values.keys().find(|k| !allowed.contains(&k.as_str())) {
            Some(k) => Err(CliError::Usage(format!("synthetic spec key '{k}' not one of {}", allowed.join(", ")))),
            None => Ok(()),
        }
    }
}

/// A fully resolved experiment.
#[derive(Clone, Debug)]
pub struct ExperimentConfig {
    pub problem: Problem,
    pub algo: Algo,
    /// Column tag in merged comparison output.
    pub name: String,
    pub synthetic: Option<SyntheticSpec>,
    pub dataset: Option<PathBuf>,
    pub format: DataFormat,
    pub axis: SampleAxis,
    pub jester_skip: usize,
    pub train_fraction: f64,
    pub p: usize,
    pub lambda: f64,
    pub msl_mode: GradientMode,
    pub seed: u64,
    pub out: PathBuf,
    pub rngd: RngdConfig,
    pub baseline: BaselineConfig,
    /// Residual at which det-rngd stops.
    pub floor: f64,
    /// Every key with its effective value.
    pub resolved: BTreeMap<String, String>,
}

impl ExperimentConfig {
    /// The resolved configuration in the on-disk format.
    pub fn to_text(&self) -> String {
        self.resolved.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }
}
