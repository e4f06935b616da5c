//! Rating datasets, train/test splitting, synthetic instances and run logs.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::error::{Error, Result};
use crate::linalg::{gaussian_matrix, seeded_rng};
use crate::manifold::{GrassmannPoint, Manifold, UnitRowPoint};

/// Sparse `(row, col, value)` rating matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct RatingDataset {
    pub n_rows: usize,
    pub n_cols: usize,
    pub entries: Vec<(usize, usize, f64)>,
    pub provenance: String,
    /// Original identifiers of re-indexed rows/columns, when the loader re-indexed.
    pub row_ids: Option<Vec<String>>,
    pub col_ids: Option<Vec<String>>,
}

impl RatingDataset {
    pub fn new(
        n_rows: usize,
        n_cols: usize,
        entries: Vec<(usize, usize, f64)>,
        provenance: impl Into<String>,
    ) -> Result<Self> {
        let mut seen = HashSet::with_capacity(entries.len());
        for &(r, c, v) in &entries {
            if r >= n_rows || c >= n_cols {
                return Err(Error::Data(format!("entry ({r},{c}) outside {n_rows}x{n_cols}")));
            }
            if !v.is_finite() {
                return Err(Error::Data(format!("non-finite value at ({r},{c})")));
            }
            if !seen.insert((r, c)) {
                return Err(Error::Data(format!("duplicate entry ({r},{c})")));
            }
        }
        Ok(Self {
            n_rows,
            n_cols,
            entries,
            provenance: provenance.into(),
            row_ids: None,
            col_ids: None,
        })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Dense matrix with zeros at missing positions.
    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(self.n_rows, self.n_cols);
        for &(r, c, v) in &self.entries {
            m[(r, c)] = v;
        }
        m
    }

    pub fn from_dense(m: &DMatrix<f64>, provenance: impl Into<String>) -> Result<Self> {
        let mut entries = Vec::with_capacity(m.len());
        for c in 0..m.ncols() {
            for r in 0..m.nrows() {
                entries.push((r, c, m[(r, c)]));
            }
        }
        Self::new(m.nrows(), m.ncols(), entries, provenance)
    }

    /// Order-sensitive FNV-1a digest of the entries.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut feed = |bytes: &[u8]| {
            for b in bytes {
                h ^= u64::from(*b);
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
        };
        feed(&(self.n_rows as u64).to_le_bytes());
        feed(&(self.n_cols as u64).to_le_bytes());
        for &(r, c, v) in &self.entries {
            feed(&(r as u64).to_le_bytes());
            feed(&(c as u64).to_le_bytes());
            feed(&v.to_bits().to_le_bytes());
        }
        h
    }

    /// Writes `<prefix>.rows.csv` / `<prefix>.cols.csv` mapping indices to original ids.
    pub fn write_id_maps(&self, prefix: &Path) -> Result<()> {
        for (ids, suffix) in [(&self.row_ids, "rows"), (&self.col_ids, "cols")] {
            if let Some(ids) = ids {
                let mut text = String::from("index,id\n");
                for (i, id) in ids.iter().enumerate() {
                    text.push_str(&format!("{i},{id}\n"));
                }
                let mut path = prefix.as_os_str().to_owned();
                path.push(format!(".{suffix}.csv"));
                write_atomic(Path::new(&path), text.as_bytes())?;
            }
        }
        Ok(())
    }
}

/// How MovieLens ids map to matrix indices.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum IdMode {
    /// Contiguous 0-based indices in order of first appearance.
    #[default]
    Dense,
    /// Index = raw id − 1, so the shape is set by the largest id.
    Raw,
}

pub fn load_movielens(path: &Path) -> Result<RatingDataset> {
    load_movielens_with(path, IdMode::Dense)
}

pub fn load_movielens_with(path: &Path, mode: IdMode) -> Result<RatingDataset> {
    let file = File::open(path)?;
    parse_movielens(BufReader::new(file), mode, &path.display().to_string())
}

pub fn parse_movielens<R: BufRead>(reader: R, mode: IdMode, provenance: &str) -> Result<RatingDataset> {
    let mut users: Vec<String> = Vec::new();
    let mut movies: Vec<String> = Vec::new();
    let mut user_idx: HashMap<String, usize> = HashMap::new();
    let mut movie_idx: HashMap<String, usize> = HashMap::new();
    let mut raw: Vec<(usize, usize, f64)> = Vec::new();
    let mut seen: HashMap<(usize, usize), usize> = HashMap::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        let lineno = lineno + 1;
        let trimmed = line.trim();
        if trimmed.is_empty() {
            continue;
        }
        let fields: Vec<&str> = trimmed.split("::").collect();
        if fields.len() != 4 {
            return Err(Error::Parse { line: lineno, msg: format!("expected 4 '::' fields, got {}", fields.len()) });
        }
        let rating: f64 = fields[2]
            .trim()
            .parse()
            .map_err(|_| Error::Parse { line: lineno, msg: format!("bad rating {:?}", fields[2]) })?;
        if !rating.is_finite() {
            return Err(Error::Parse { line: lineno, msg: "non-finite rating".into() });
        }
        fields[3]
            .trim()
            .parse::<i64>()
            .map_err(|_| Error::Parse { line: lineno, msg: format!("bad timestamp {:?}", fields[3]) })?;
        let (u, m) = match mode {
            IdMode::Dense => {
                let intern = |map: &mut HashMap<String, usize>, list: &mut Vec<String>, id: &str| {
                    *map.entry(id.to_string()).or_insert_with(|| {
                        list.push(id.to_string());
                        list.len() - 1
                    })
                };
                (
                    intern(&mut user_idx, &mut users, fields[0].trim()),
                    intern(&mut movie_idx, &mut movies, fields[1].trim()),
                )
            }
            IdMode::Raw => {
                let parse_id = |s: &str| -> Result<usize> {
                    let id: usize = s
                        .trim()
                        .parse()
                        .map_err(|_| Error::Parse { line: lineno, msg: format!("bad id {s:?}") })?;
                    id.checked_sub(1).ok_or(Error::Parse { line: lineno, msg: "ids start at 1".into() })
                };
                (parse_id(fields[0])?, parse_id(fields[1])?)
            }
        };
        if let Some(prev) = seen.insert((u, m), lineno) {
            return Err(Error::Parse {
                line: lineno,
                msg: format!(
                    "duplicate rating for user {} movie {} (first at line {prev})",
                    fields[0].trim(),
                    fields[1].trim()
                ),
            });
        }
        raw.push((u, m, rating));
    }
    if raw.is_empty() {
        return Err(Error::Data(format!("{provenance}: no ratings found")));
    }
    let (n_rows, n_cols) = match mode {
        IdMode::Dense => (users.len(), movies.len()),
        IdMode::Raw => (
            raw.iter().map(|e| e.0).max().unwrap_or(0) + 1,
            raw.iter().map(|e| e.1).max().unwrap_or(0) + 1,
        ),
    };
    let mut ds = RatingDataset::new(n_rows, n_cols, raw, format!("movielens:{provenance}"))?;
    if mode == IdMode::Dense {
        ds.row_ids = Some(users);
        ds.col_ids = Some(movies);
    }
    Ok(ds)
}

pub const JESTER_MISSING: f64 = 99.0;

#[derive(Clone, Copy, Debug, Default)]
pub struct JesterOptions {
    /// Leading columns to drop from each row (the published files start with a count column).
    pub skip_leading: usize,
}

pub fn load_jester(path: &Path, opts: JesterOptions) -> Result<RatingDataset> {
    let file = File::open(path)?;
    parse_jester(BufReader::new(file), opts, &path.display().to_string())
}

/// Dense rows separated by commas, semicolons, tabs or spaces; `99` marks a missing rating.
pub fn parse_jester<R: BufRead>(reader: R, opts: JesterOptions, provenance: &str) -> Result<RatingDataset> {
    let mut entries = Vec::new();
    let mut n_cols: Option<usize> = None;
    let mut n_rows = 0;
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        let lineno = lineno + 1;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line
            .split([',', ';', '\t', ' '])
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .collect();
        if fields.len() <= opts.skip_leading {
            return Err(Error::Parse { line: lineno, msg: "row has no rating columns".into() });
        }
        let values = &fields[opts.skip_leading..];
        match n_cols {
            None => n_cols = Some(values.len()),
            Some(c) if c != values.len() => {
                return Err(Error::Parse { line: lineno, msg: format!("expected {c} columns, got {}", values.len()) })
            }
            _ => {}
        }
        for (c, s) in values.iter().enumerate() {
            let v: f64 = s
                .parse()
                .map_err(|_| Error::Parse { line: lineno, msg: format!("bad rating {s:?}") })?;
            if v == JESTER_MISSING {
                continue;
            }
            if !(-10.0..=10.0).contains(&v) {
                return Err(Error::Parse { line: lineno, msg: format!("rating {v} outside [-10, 10]") });
            }
            entries.push((n_rows, c, v));
        }
        n_rows += 1;
    }
    let n_cols = n_cols.ok_or_else(|| Error::Data(format!("{provenance}: empty file")))?;
    RatingDataset::new(n_rows, n_cols, entries, format!("jester:{provenance}"))
}

/// Canonical form: `# n_rows=R,n_cols=C` then `row,col,value` lines.
pub fn write_ratings_csv(ds: &RatingDataset, path: &Path) -> Result<()> {
    let mut text = format!("# n_rows={},n_cols={}\nrow,col,value\n", ds.n_rows, ds.n_cols);
    for &(r, c, v) in &ds.entries {
        text.push_str(&format!("{r},{c},{v}\n"));
    }
    write_atomic(path, text.as_bytes())
}

pub fn read_ratings_csv(path: &Path) -> Result<RatingDataset> {
    let reader = BufReader::new(File::open(path)?);
    let mut shape: Option<(usize, usize)> = None;
    let mut entries = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        let lineno = lineno + 1;
        let t = line.trim();
        if t.is_empty() || t == "row,col,value" {
            continue;
        }
        if let Some(meta) = t.strip_prefix('#') {
            let mut r = None;
            let mut c = None;
            for kv in meta.split(',') {
                match kv.trim().split_once('=') {
                    Some(("n_rows", v)) => r = v.trim().parse().ok(),
                    Some(("n_cols", v)) => c = v.trim().parse().ok(),
                    _ => {}
                }
            }
            if let (Some(r), Some(c)) = (r, c) {
                shape = Some((r, c));
            }
            continue;
        }
        let parts: Vec<&str> = t.split(',').map(str::trim).collect();
        if parts.len() != 3 {
            return Err(Error::Parse { line: lineno, msg: "expected row,col,value".into() });
        }
        let bad = |what: &str| Error::Parse { line: lineno, msg: format!("bad {what}") };
        let r: usize = parts[0].parse().map_err(|_| bad("row"))?;
        let c: usize = parts[1].parse().map_err(|_| bad("col"))?;
        let v: f64 = parts[2].parse().map_err(|_| bad("value"))?;
        entries.push((r, c, v));
    }
    let (n_rows, n_cols) = match shape {
        Some(s) => s,
        None => (
            entries.iter().map(|e| e.0 + 1).max().unwrap_or(0),
            entries.iter().map(|e| e.1 + 1).max().unwrap_or(0),
        ),
    };
    RatingDataset::new(n_rows, n_cols, entries, format!("csv:{}", path.display()))
}

#[derive(Clone, Debug)]
pub struct SplitDataset {
    pub train: RatingDataset,
    pub test: RatingDataset,
    pub seed: u64,
    pub fraction: f64,
}

impl SplitDataset {
    /// Digest of the train/test assignment; equal for equal `(dataset, fraction, seed)`.
    pub fn checksum(&self) -> u64 {
        self.train.checksum() ^ self.test.checksum().rotate_left(1)
    }
}

/// Assigns each entry to train with probability `fraction`.
pub fn split(ds: &RatingDataset, fraction: f64, seed: u64) -> Result<SplitDataset> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::contract(format!("split fraction must lie in (0,1), got {fraction}")));
    }
    let mut rng = seeded_rng(seed);
    let mut train = Vec::new();
    let mut test = Vec::new();
    for &e in &ds.entries {
        if rng.random::<f64>() < fraction {
            train.push(e);
        } else {
            test.push(e);
        }
    }
    if train.is_empty() || test.is_empty() {
        return Err(Error::Data(format!(
            "degenerate split: {} train / {} test entries",
            train.len(),
            test.len()
        )));
    }
    let side = |entries, tag: &str| {
        RatingDataset {
            n_rows: ds.n_rows,
            n_cols: ds.n_cols,
            entries,
            provenance: format!("{}#{tag}", ds.provenance),
            row_ids: ds.row_ids.clone(),
            col_ids: ds.col_ids.clone(),
        }
    };
    Ok(SplitDataset { train: side(train, "train"), test: side(test, "test"), seed, fraction })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Noise {
    None,
    /// Additive Gaussian noise with this standard deviation.
    Std(f64),
    /// Gaussian noise scaled to the given signal-to-noise ratio in decibels.
    SnrDb(f64),
}

#[derive(Clone, Debug)]
pub struct SynthLrmc {
    /// `n×N` matrix; each column is one sample.
    pub dataset: RatingDataset,
    pub truth: GrassmannPoint,
    pub coefficients: DMatrix<f64>,
    /// Noisy matrix before masking.
    pub full: DMatrix<f64>,
}

impl SynthLrmc {
    /// Entries of the noisy matrix that were not observed; `None` under full observation.
    pub fn held_out(&self) -> Result<Option<RatingDataset>> {
        let (n, big_n) = self.full.shape();
        let mut seen = vec![false; n * big_n];
        for &(r, c, _) in &self.dataset.entries {
            seen[c * n + r] = true;
        }
        let entries: Vec<_> = (0..big_n)
            .flat_map(|c| (0..n).map(move |r| (r, c)))
            .filter(|&(r, c)| !seen[c * n + r])
            .map(|(r, c)| (r, c, self.full[(r, c)]))
            .collect();
        if entries.is_empty() {
            return Ok(None);
        }
        let provenance = format!("{}#held-out", self.dataset.provenance);
        RatingDataset::new(n, big_n, entries, provenance).map(Some)
    }
}

/// `X = U* A* + noise` with a uniformly random `U*` and Gaussian `A*`, each entry
/// observed independently with probability `obs_fraction`.
pub fn synth_lrmc(n: usize, big_n: usize, p: usize, obs_fraction: f64, noise: Noise, seed: u64) -> Result<SynthLrmc> {
    if p == 0 || n < p || big_n == 0 {
        return Err(Error::contract(format!("invalid LRMC shape n={n}, N={big_n}, p={p}")));
    }
    if !(obs_fraction > 0.0 && obs_fraction <= 1.0) {
        return Err(Error::contract(format!("observation fraction must lie in (0,1], got {obs_fraction}")));
    }
    let mut rng = seeded_rng(seed);
    let truth = GrassmannPoint::random(n, p, &mut rng)?;
    let coefficients = gaussian_matrix(p, big_n, &mut rng);
    let clean = truth.matrix() * &coefficients;
    let std = match noise {
        Noise::None => 0.0,
        Noise::Std(s) => s,
        Noise::SnrDb(db) => {
            let power = clean.norm_squared() / clean.len() as f64;
            (power / 10f64.powf(db / 10.0)).sqrt()
        }
    };
    let full = if std > 0.0 { &clean + gaussian_matrix(n, big_n, &mut rng) * std } else { clean };
    let mut entries = Vec::new();
    for c in 0..big_n {
        for r in 0..n {
            if obs_fraction >= 1.0 || rng.random::<f64>() < obs_fraction {
                entries.push((r, c, full[(r, c)]));
            }
        }
    }
    let dataset = RatingDataset::new(n, big_n, entries, format!("synthetic-lrmc:n={n},N={big_n},p={p},seed={seed}"))?;
    Ok(SynthLrmc { dataset, truth, coefficients, full })
}

/// One regression task: design `x` (`d×n`) and response `y` (length `d`).
#[derive(Clone, Debug, PartialEq)]
pub struct MslTask {
    pub x: DMatrix<f64>,
    pub y: DVector<f64>,
}

#[derive(Clone, Debug)]
pub struct SynthMsl {
    pub tasks: Vec<MslTask>,
    pub truth: GrassmannPoint,
}

/// Tasks with responses `y = X U* w* + noise` sharing one latent subspace.
pub fn synth_msl(
    n: usize,
    p: usize,
    num_tasks: usize,
    rows_per_task: usize,
    noise_std: f64,
    seed: u64,
) -> Result<SynthMsl> {
    if p == 0 || n < p || num_tasks == 0 || rows_per_task == 0 {
        return Err(Error::contract("invalid subspace-learning shape"));
    }
    let mut rng = seeded_rng(seed);
    let truth = GrassmannPoint::random(n, p, &mut rng)?;
    let tasks = (0..num_tasks)
        .map(|_| {
            let x = gaussian_matrix(rows_per_task, n, &mut rng);
            let w = gaussian_matrix(p, 1, &mut rng);
            let mut y = (&x * truth.matrix() * w).column(0).into_owned();
            if noise_std > 0.0 {
                y += crate::linalg::gaussian_vector(rows_per_task, &mut rng) * noise_std;
            }
            MslTask { x, y }
        })
        .collect();
    Ok(SynthMsl { tasks, truth })
}

/// Reads `task,y,x1,…,xn` rows (an optional header line is skipped).
pub fn load_msl_csv(path: &Path) -> Result<Vec<MslTask>> {
    let reader = BufReader::new(File::open(path)?);
    let mut grouped: BTreeMap<String, (Vec<f64>, Vec<Vec<f64>>)> = BTreeMap::new();
    let mut order: Vec<String> = Vec::new();
    let mut width: Option<usize> = None;
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        let lineno = lineno + 1;
        let t = line.trim();
        if t.is_empty() || t.starts_with('#') {
            continue;
        }
        let parts: Vec<&str> = t.split(',').map(str::trim).collect();
        if parts.len() < 3 {
            return Err(Error::Parse { line: lineno, msg: "expected task,y,x1,...".into() });
        }
        let nums: std::result::Result<Vec<f64>, _> = parts[1..].iter().map(|s| s.parse::<f64>()).collect();
        let nums = match nums {
            Ok(v) => v,
            Err(_) if lineno == 1 => continue,
            Err(_) => return Err(Error::Parse { line: lineno, msg: "non-numeric field".into() }),
        };
        if nums.iter().any(|v| !v.is_finite()) {
            return Err(Error::Parse { line: lineno, msg: "non-finite value".into() });
        }
        match width {
            None => width = Some(nums.len() - 1),
            Some(w) if w != nums.len() - 1 => {
                return Err(Error::Parse { line: lineno, msg: format!("expected {w} features") })
            }
            _ => {}
        }
        let task = parts[0].to_string();
        let slot = grouped.entry(task.clone()).or_insert_with(|| {
            order.push(task);
            (Vec::new(), Vec::new())
        });
        slot.0.push(nums[0]);
        slot.1.push(nums[1..].to_vec());
    }
    if order.is_empty() {
        return Err(Error::Data(format!("{}: no tasks found", path.display())));
    }
    let n = width.unwrap_or(0);
    Ok(order
        .iter()
        .map(|name| {
            let (ys, xs) = &grouped[name];
            MslTask {
                x: DMatrix::from_fn(xs.len(), n, |i, j| xs[i][j]),
                y: DVector::from_vec(ys.clone()),
            }
        })
        .collect())
}

pub fn write_msl_csv(tasks: &[MslTask], path: &Path) -> Result<()> {
    let mut text = String::new();
    for (t, task) in tasks.iter().enumerate() {
        for i in 0..task.y.len() {
            text.push_str(&format!("{t},{}", task.y[i]));
            for j in 0..task.x.ncols() {
                text.push_str(&format!(",{}", task.x[(i, j)]));
            }
            text.push('\n');
        }
    }
    write_atomic(path, text.as_bytes())
}

/// Splits every task's rows independently; tasks left without a training row keep all rows in train.
pub fn split_msl(tasks: &[MslTask], fraction: f64, seed: u64) -> Result<(Vec<MslTask>, Vec<MslTask>)> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::contract(format!("split fraction must lie in (0,1), got {fraction}")));
    }
    let mut rng = seeded_rng(seed);
    let mut train = Vec::with_capacity(tasks.len());
    let mut test = Vec::with_capacity(tasks.len());
    for task in tasks {
        let mask: Vec<bool> = (0..task.y.len()).map(|_| rng.random::<f64>() < fraction).collect();
        let pick = |keep: bool| -> MslTask {
            let idx: Vec<usize> = (0..mask.len()).filter(|&i| mask[i] == keep).collect();
            MslTask {
                x: task.x.select_rows(idx.iter()),
                y: DVector::from_iterator(idx.len(), idx.iter().map(|&i| task.y[i])),
            }
        };
        let tr = pick(true);
        let te = pick(false);
        train.push(tr);
        test.push(te);
    }
    if train.iter().all(|t| t.y.is_empty()) || test.iter().all(|t| t.y.is_empty()) {
        return Err(Error::Data("degenerate task split".into()));
    }
    Ok((train, test))
}

/// Inputs and targets for the two-layer network, plus an initial point.
#[derive(Clone, Debug)]
pub struct NnInstance {
    /// `N×n`, one unit-norm input per row.
    pub xs: DMatrix<f64>,
    pub ys: DVector<f64>,
    pub theta0: UnitRowPoint,
    /// Output weights in {−1, +1}.
    pub a: DVector<f64>,
    /// Norm of the empirical input mean after re-normalization.
    pub residual_mean_norm: f64,
}

pub fn synth_nn(n: usize, big_n: usize, m: usize, seed: u64) -> Result<NnInstance> {
    if n < 2 || big_n == 0 || m == 0 {
        return Err(Error::contract(format!("invalid network instance n={n}, N={big_n}, m={m}")));
    }
    let mut rng = seeded_rng(seed);
    let mut attempt = 0;
    let xs = loop {
        attempt += 1;
        let mut xs = gaussian_matrix(big_n, n, &mut rng);
        normalize_rows(&mut xs)?;
        // Centering two points would make them antipodal.
        if big_n >= 3 {
            let mean = xs.row_mean();
            for mut row in xs.row_iter_mut() {
                row -= &mean;
            }
            normalize_rows(&mut xs)?;
        }
        if min_pairwise_separation(&xs) > 1e-6 {
            break xs;
        }
        if attempt >= 100 {
            return Err(Error::Data("could not draw pairwise distinct inputs".into()));
        }
    };
    let residual_mean_norm = xs.row_mean().norm();
    log::debug!("synthetic network inputs: residual mean norm {residual_mean_norm:e}");
    let ys = DVector::from_fn(big_n, |_, _| rng.random_range(-1.0..=1.0));
    let theta0 = UnitRowPoint::random(m, n, &mut rng)?;
    let a = DVector::from_fn(m, |_, _| if rng.random::<bool>() { 1.0 } else { -1.0 });
    Ok(NnInstance { xs, ys, theta0, a, residual_mean_norm })
}

fn normalize_rows(xs: &mut DMatrix<f64>) -> Result<()> {
    for mut row in xs.row_iter_mut() {
        let nrm = row.norm();
        if nrm < 1e-12 {
            return Err(Error::numerical("zero input row"));
        }
        row /= nrm;
    }
    Ok(())
}

/// `min_{i<j} min(‖x_i − x_j‖, ‖x_i + x_j‖)`.
pub fn min_pairwise_separation(xs: &DMatrix<f64>) -> f64 {
    let mut best = f64::INFINITY;
    for i in 0..xs.nrows() {
        for j in i + 1..xs.nrows() {
            let d = (xs.row(i) - xs.row(j)).norm().min((xs.row(i) + xs.row(j)).norm());
            best = best.min(d);
        }
    }
    best
}

/// Writes `bytes` to a sibling temporary file and renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = tmp_path(path);
    {
        let mut f = File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

fn tmp_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".tmp");
    PathBuf::from(s)
}

fn sidecar_path(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

/// One epoch of a run.
#[derive(Clone, Debug, PartialEq)]
pub struct RunRecord {
    pub epoch: usize,
    /// Per-sample gradient evaluations divided by the dataset size.
    pub grad_evals_per_n: f64,
    pub train: f64,
    pub test: Option<f64>,
    pub sigma: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunLog {
    pub metadata: BTreeMap<String, String>,
    pub records: Vec<RunRecord>,
}

pub const RUN_LOG_COLUMNS: &str = "epoch,grad_evals_per_n,train,test,sigma";

/// Append-only writer; each record is flushed as soon as it is written.
///
/// Records go to `<path>.tmp` until [`RunLogWriter::finish`] renames the file
/// into place. Wall-clock timings go to the `<path>.timing.csv` sidecar so the
/// main log stays a deterministic function of the configuration.
pub struct RunLogWriter {
    path: PathBuf,
    out: BufWriter<File>,
    timing: BufWriter<File>,
    last_epoch: Option<usize>,
}

impl RunLogWriter {
    pub fn create(path: &Path, metadata: &BTreeMap<String, String>) -> Result<Self> {
        let mut out = BufWriter::new(File::create(tmp_path(path))?);
        let header = serde_json::to_string(metadata).map_err(|e| Error::Data(e.to_string()))?;
        writeln!(out, "# {header}")?;
        writeln!(out, "{RUN_LOG_COLUMNS}")?;
        out.flush()?;
        let mut timing = BufWriter::new(File::create(tmp_path(&sidecar_path(path, ".timing.csv")))?);
        writeln!(timing, "epoch,wall_seconds")?;
        timing.flush()?;
        Ok(Self { path: path.to_path_buf(), out, timing, last_epoch: None })
    }

    pub fn append(&mut self, rec: &RunRecord, wall_seconds: f64) -> Result<()> {
        if let Some(last) = self.last_epoch {
            if rec.epoch <= last {
                return Err(Error::contract(format!("epoch {} after {last}", rec.epoch)));
            }
        }
        let finite = rec.train.is_finite()
            && rec.grad_evals_per_n.is_finite()
            && rec.test.is_none_or(f64::is_finite)
            && rec.sigma.is_none_or(f64::is_finite);
        if !finite {
            return Err(Error::numerical(format!("non-finite metric at epoch {}", rec.epoch)));
        }
        writeln!(self.out, "{}", format_record(rec))?;
        self.out.flush()?;
        writeln!(self.timing, "{},{wall_seconds}", rec.epoch)?;
        self.timing.flush()?;
        self.last_epoch = Some(rec.epoch);
        Ok(())
    }

    pub fn finish(mut self) -> Result<()> {
        self.out.flush()?;
        self.timing.flush()?;
        fs::rename(tmp_path(&self.path), &self.path)?;
        let timing = sidecar_path(&self.path, ".timing.csv");
        fs::rename(tmp_path(&timing), &timing)?;
        Ok(())
    }
}

/// Shortest round-trip text; exponent form outside `[1e-4, 1e15)`.
pub fn format_float(x: f64) -> String {
    let a = x.abs();
    if a == 0.0 || !x.is_finite() || (1e-4..1e15).contains(&a) {
        x.to_string()
    } else {
        format!("{x:e}")
    }
}

fn format_opt(v: Option<f64>) -> String {
    v.map(format_float).unwrap_or_default()
}

fn format_record(r: &RunRecord) -> String {
    format!(
        "{},{},{},{},{}",
        r.epoch,
        format_float(r.grad_evals_per_n),
        format_float(r.train),
        format_opt(r.test),
        format_opt(r.sigma)
    )
}

/// Writes a complete log in one atomic step.
pub fn write_run_log(log: &RunLog, path: &Path) -> Result<()> {
    let mut w = RunLogWriter::create(path, &log.metadata)?;
    for r in &log.records {
        w.append(r, 0.0)?;
    }
    w.finish()
}

/// Reads a log; a final line without a terminating newline or that fails to parse is dropped.
pub fn read_run_log(path: &Path) -> Result<RunLog> {
    let text = fs::read_to_string(path)?;
    let mut log = RunLog::default();
    let complete = text.ends_with('\n');
    let lines: Vec<&str> = text.lines().collect();
    let total = lines.len();
    for (i, line) in lines.into_iter().enumerate() {
        let is_last = i + 1 == total;
        if let Some(meta) = line.strip_prefix('#') {
            log.metadata = serde_json::from_str(meta.trim())
                .map_err(|e| Error::Parse { line: i + 1, msg: e.to_string() })?;
            continue;
        }
        if line.trim().is_empty() || line == RUN_LOG_COLUMNS {
            continue;
        }
        if is_last && !complete {
            break;
        }
        match parse_record(line) {
            Some(r) => log.records.push(r),
            None if is_last => break,
            None => return Err(Error::Parse { line: i + 1, msg: "malformed run-log record".into() }),
        }
    }
    Ok(log)
}

fn parse_record(line: &str) -> Option<RunRecord> {
    let parts: Vec<&str> = line.split(',').collect();
    if parts.len() != 5 {
        return None;
    }
    let opt = |s: &str| -> Option<Option<f64>> {
        if s.is_empty() {
            Some(None)
        } else {
            s.parse().ok().map(Some)
        }
    };
    Some(RunRecord {
        epoch: parts[0].parse().ok()?,
        grad_evals_per_n: parts[1].parse().ok()?,
        train: parts[2].parse().ok()?,
        test: opt(parts[3])?,
        sigma: opt(parts[4])?,
    })
}
