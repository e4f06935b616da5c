//! Executable checks of the geometric, statistical and convergence claims
//! behind the optimizer, each producing a machine-readable [`CheckReport`].

use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rayon::prelude::*;

use crate::data::{format_float, synth_lrmc, synth_msl, synth_nn, Noise};
use crate::error::{Error, Result};
use crate::fisher::{
    exact_refim, kron_refim, relative_spectral_distance, solve_damped, DampedOperator, DenseFisher, FisherOperator,
    SolveMethod, SolverSettings,
};
use crate::linalg::{fit_slope, gaussian_matrix, gaussian_vector, median, seeded_rng, shard_rng, vec_of};
use crate::manifold::{inner, project, retract, GrassmannPoint, Manifold, RetractionKind, TangentVector, UnitRowPoint};
use crate::models::lrmc::{exact_gaussian_fisher, expected_kl, lrmc_coeffs};
use crate::models::{
    full_batch, BnProblem, LrmcProblem, ModelProblem, OutputModel, SampleAxis, SubspaceLearningProblem,
    TwoLayerBnNet,
};
use crate::optim::det_rngd_run;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Relation {
    /// `value ≤ threshold`.
    Le,
    /// `value ≥ threshold`.
    Ge,
    /// Logged only.
    Info,
}

impl Relation {
    fn as_str(self) -> &'static str {
        match self {
            Relation::Le => "le",
            Relation::Ge => "ge",
            Relation::Info => "info",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Measurement {
    pub quantity: String,
    pub value: f64,
    pub relation: Relation,
    pub threshold: f64,
}

impl Measurement {
    pub fn passed(&self) -> bool {
        match self.relation {
            Relation::Le => self.value <= self.threshold,
            Relation::Ge => self.value >= self.threshold,
            Relation::Info => true,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Status {
    Pass,
    Fail,
    Inconclusive,
}

impl Status {
    pub fn as_str(self) -> &'static str {
        match self {
            Status::Pass => "pass",
            Status::Fail => "fail",
            Status::Inconclusive => "inconclusive",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CheckReport {
    pub check: String,
    pub seed: u64,
    pub measurements: Vec<Measurement>,
    /// Set when the check could not be carried out as designed.
    pub inconclusive: Option<String>,
}

impl CheckReport {
    pub fn new(check: impl Into<String>, seed: u64) -> Self {
        Self { check: check.into(), seed, measurements: Vec::new(), inconclusive: None }
    }

    fn push(&mut self, quantity: impl Into<String>, value: f64, relation: Relation, threshold: f64) {
        self.measurements.push(Measurement { quantity: quantity.into(), value, relation, threshold });
    }

    pub fn le(&mut self, quantity: impl Into<String>, value: f64, threshold: f64) {
        self.push(quantity, value, Relation::Le, threshold);
    }

    pub fn ge(&mut self, quantity: impl Into<String>, value: f64, threshold: f64) {
        self.push(quantity, value, Relation::Ge, threshold);
    }

    pub fn info(&mut self, quantity: impl Into<String>, value: f64) {
        self.push(quantity, value, Relation::Info, f64::NAN);
    }

    /// Pass iff every thresholded measurement passes.
    pub fn status(&self) -> Status {
        if self.measurements.iter().any(|m| !m.passed()) {
            Status::Fail
        } else if self.inconclusive.is_some() {
            Status::Inconclusive
        } else {
            Status::Pass
        }
    }

    pub fn passed(&self) -> bool {
        self.status() == Status::Pass
    }

    pub fn failures(&self) -> impl Iterator<Item = &Measurement> {
        self.measurements.iter().filter(|m| !m.passed())
    }
}

pub const REPORT_COLUMNS: &str = "check,seed,status,quantity,value,relation,threshold";

/// One CSV row per measurement; a report without measurements gets one row.
pub fn reports_csv(reports: &[CheckReport]) -> String {
    let mut out = String::from(REPORT_COLUMNS);
    out.push('\n');
    for r in reports {
        let status = r.status().as_str();
        if r.measurements.is_empty() {
            let _ = writeln!(out, "{},{},{},,,,", r.check, r.seed, status);
        }
        for m in &r.measurements {
            let threshold = if m.relation == Relation::Info { String::new() } else { format_float(m.threshold) };
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{}",
                r.check,
                r.seed,
                status,
                m.quantity,
                format_float(m.value),
                m.relation.as_str(),
                threshold
            );
        }
    }
    out
}

/// Human-readable summary, one line per report plus failing quantities.
pub fn summary(reports: &[CheckReport]) -> String {
    let mut out = String::new();
    for r in reports {
        let _ = writeln!(out, "{:<12} {:<28} seed={}", r.status().as_str(), r.check, r.seed);
        if let Some(why) = &r.inconclusive {
            let _ = writeln!(out, "    inconclusive: {why}");
        }
        for m in r.failures() {
            let op = if m.relation == Relation::Le { "<=" } else { ">=" };
            let _ = writeln!(out, "    {} = {:e} violates {op} {:e}", m.quantity, m.value, m.threshold);
        }
    }
    let passed = reports.iter().filter(|r| r.passed()).count();
    let _ = writeln!(out, "{passed}/{} checks passed", reports.len());
    out
}

// ---------------------------------------------------------------- geometry

const ORDER_STEPS: [f64; 4] = [1e-1, 1e-2, 1e-3, 1e-4];

/// Retraction order on Gr(n, p): `‖R(tξ) − Θ − tξ‖ = O(t²)` for every
/// retraction, and the tangential part is `O(t³)` for Polar and Exp.
/// Also checks the projection against a dense projector.
pub fn check_geometry(n: usize, p: usize, trials: usize, seed: u64) -> Result<CheckReport> {
    let mut report = CheckReport::new("geometry", seed);
    let mut rng = seeded_rng(seed);
    let logs: Vec<f64> = ORDER_STEPS.iter().map(|t| t.ln()).collect();
    let kinds = [RetractionKind::Qr, RetractionKind::Polar, RetractionKind::Exponential];
    let mut first = [f64::INFINITY; 3];
    let mut second = [f64::INFINITY; 3];
    let mut proj_err: f64 = 0.0;
    for _ in 0..trials {
        let theta = GrassmannPoint::random(n, p, &mut rng)?;
        let ambient = gaussian_matrix(n, p, &mut rng);
        let xi = project(&theta, &ambient)?;
        let xi = xi.scaled(1.0 / xi.norm());
        let dense = DMatrix::identity(n * p, n * p)
            - crate::linalg::kron(&DMatrix::identity(p, p), &(theta.matrix() * theta.matrix().transpose()));
        proj_err = proj_err.max((vec_of(xi.mat()) * xi.norm() - &dense * vec_of(&xi.mat().clone())).norm());
        let direct = project(&theta, &ambient)?;
        proj_err = proj_err.max((vec_of(direct.mat()) - &dense * vec_of(&ambient)).norm() / ambient.norm());
        for (k, &kind) in kinds.iter().enumerate() {
            let mut full = Vec::new();
            let mut tangential = Vec::new();
            for &t in &ORDER_STEPS {
                let moved = retract(&theta, &xi, t, kind)?;
                let diff = moved.matrix() - theta.matrix() - xi.mat() * t;
                full.push(diff.norm().ln());
                tangential.push(theta.project_ambient(&diff).norm().ln());
            }
            first[k] = first[k].min(fit_slope(&logs, &full));
            second[k] = second[k].min(fit_slope(&logs, &tangential));
        }
    }
    for (k, kind) in kinds.iter().enumerate() {
        report.ge(format!("{kind}_first_order_slope"), first[k], 1.9);
        if *kind == RetractionKind::Qr {
            report.info(format!("{kind}_tangential_slope"), second[k]);
        } else {
            report.ge(format!("{kind}_tangential_slope"), second[k], 2.9);
        }
    }
    report.le("projection_vs_dense", proj_err, 1e-12);
    Ok(report)
}

// --------------------------------------------------------------- gradients

/// Central difference of `Ψ∘R_θ` along unit `ξ` with step `h = ε^{1/3}`.
fn directional_fd<M: ModelProblem>(problem: &M, point: &M::Point, xi: &TangentVector<M::Point>, batch: &[usize]) -> Result<f64> {
    let h = f64::EPSILON.cbrt();
    let plus = retract(point, xi, h, RetractionKind::Polar)?;
    let minus = retract(point, xi, -h, RetractionKind::Polar)?;
    Ok((problem.loss(&plus, batch)? - problem.loss(&minus, batch)?) / (2.0 * h))
}

fn gradient_errors<M, F>(problem: &M, point: &M::Point, dirs: usize, rng: &mut crate::linalg::SeededRng, usable: F) -> Result<Vec<f64>>
where
    M: ModelProblem,
    F: Fn(&TangentVector<M::Point>) -> bool,
{
    let batch = full_batch(problem.num_samples());
    let (_, g) = problem.loss_grad(point, &batch)?;
    let (r, c) = point.shape();
    let mut errors = Vec::with_capacity(dirs);
    let mut attempts = 0;
    while errors.len() < dirs {
        attempts += 1;
        if attempts > 50 * dirs {
            return Err(Error::numerical("could not find usable finite-difference directions"));
        }
        let xi = project(point, &gaussian_matrix(r, c, rng))?;
        let xi = xi.scaled(1.0 / xi.norm());
        let analytic = inner(&g, &xi)?;
        // Near-orthogonal directions make the relative error meaningless.
        if analytic.abs() < 1e-3 * g.norm() || !usable(&xi) {
            continue;
        }
        let fd = directional_fd(problem, point, &xi, &batch)?;
        errors.push((fd - analytic).abs() / analytic.abs());
    }
    Ok(errors)
}

/// Signs of all pre-activations agree at `θ` and at `R_θ(±hξ)`.
fn kink_free(net: &TwoLayerBnNet, xs: &DMatrix<f64>, theta: &UnitRowPoint, xi: &TangentVector<UnitRowPoint>, h: f64) -> bool {
    let signs = |p: &UnitRowPoint| -> Option<Vec<bool>> {
        let pre = p.matrix() * xs.transpose();
        if pre.iter().any(|v| v.abs() < 1e-12) {
            return None;
        }
        Some(pre.iter().map(|&v| v > 0.0).collect())
    };
    let _ = net;
    let base = signs(theta);
    let at = |t: f64| retract(theta, xi, t, RetractionKind::Polar).ok().and_then(|p| signs(&p));
    base.is_some() && base == at(h) && base == at(-h)
}

/// Riemannian gradients of the three models against central differences of `Ψ∘R`.
pub fn check_gradients(dirs: usize, seed: u64) -> Result<CheckReport> {
    let mut report = CheckReport::new("gradients", seed);
    let mut rng = seeded_rng(seed);

    let s = synth_lrmc(12, 30, 3, 0.6, Noise::Std(0.1), seed)?;
    let lrmc = LrmcProblem::from_ratings(&s.dataset, None, 3, SampleAxis::Columns)?;
    let u = GrassmannPoint::random(12, 3, &mut rng)?;
    let e = gradient_errors(&lrmc, &u, dirs, &mut rng, |_| true)?;
    report.le("lrmc_max_rel_error", e.iter().cloned().fold(0.0, f64::max), 1e-5);

    let m = synth_msl(10, 2, 4, 8, 0.1, seed.wrapping_add(1))?;
    let msl = SubspaceLearningProblem::new(2, 0.1, m.tasks, None)?;
    let u = GrassmannPoint::random(10, 2, &mut rng)?;
    let e = gradient_errors(&msl, &u, dirs, &mut rng, |_| true)?;
    report.le("msl_exact_max_rel_error", e.iter().cloned().fold(0.0, f64::max), 1e-5);

    let inst = synth_nn(6, 8, 16, seed.wrapping_add(2))?;
    let net = TwoLayerBnNet::with_population_stats(inst.a.clone(), 6)?;
    let bn = BnProblem::new(net.clone(), inst.xs.clone(), inst.ys.clone())?;
    let h = f64::EPSILON.cbrt();
    let e = gradient_errors(&bn, &inst.theta0, dirs, &mut rng, |xi| kink_free(&net, &inst.xs, &inst.theta0, xi, h))?;
    report.le("bn_max_rel_error", e.iter().cloned().fold(0.0, f64::max), 1e-5);
    Ok(report)
}

// ------------------------------------------------------------------ Fisher

/// Dense empirical Fisher of the LRMC approximate per-sample gradients
/// `(I − UUᵀ) r_i a_iᵀ` against its Kronecker factorization.
pub fn lrmc_refim_pair(problem: &LrmcProblem, u: &GrassmannPoint, batch: &[usize]) -> Result<(DenseFisher, DenseFisher)> {
    let cols = problem.train_columns();
    let n = u.n();
    let mut grads = Vec::with_capacity(batch.len());
    let mut a_samples = Vec::with_capacity(batch.len());
    let mut g_samples = Vec::with_capacity(batch.len());
    for &i in batch {
        let col = cols.get(i).ok_or_else(|| Error::contract(format!("sample {i} out of range")))?;
        let a = lrmc_coeffs(u, col)?.a;
        let mut r = DVector::zeros(n);
        for (&row, &val) in col.rows.iter().zip(&col.values) {
            r[row] = u.matrix().row(row).transpose().dot(&a) - val;
        }
        let rm = DMatrix::from_column_slice(n, 1, r.as_slice());
        let am = DMatrix::from_column_slice(a.len(), 1, a.as_slice());
        grads.push(project(u, &(&rm * am.transpose()))?);
        a_samples.push(am);
        g_samples.push(rm);
    }
    let dense = exact_refim(&grads)?;
    let kron = kron_refim(&a_samples, &g_samples)?.to_dense(u)?;
    Ok((dense, kron))
}

/// Spectral distance between dense and Kronecker empirical Fisher.
///
/// The factorization is exact for one sample or for identical samples, and
/// only logged otherwise.
pub fn check_fisher_consistency(problem: &LrmcProblem, u: &GrassmannPoint, batch: &[usize], seed: u64) -> Result<CheckReport> {
    let mut report = CheckReport::new("fisher_consistency", seed);
    let (dense, kron) = lrmc_refim_pair(problem, u, batch)?;
    let dist = relative_spectral_distance(&dense, &kron);
    let cols = problem.train_columns();
    let identical = batch.iter().all(|&i| cols[i] == cols[batch[0]]);
    if !dist.is_finite() {
        report.le("relative_spectral_distance", dist, f64::MAX);
    } else if identical {
        report.le("relative_spectral_distance", dist, 1e-10);
    } else {
        report.info("relative_spectral_distance", dist);
    }
    report.info("batch_size", batch.len() as f64);
    Ok(report)
}

/// The standard Fisher instances: one column, a repeated column, and 20 heterogeneous columns.
pub fn check_fisher_suite(seed: u64) -> Result<Vec<CheckReport>> {
    let mut rng = seeded_rng(seed);
    let u = GrassmannPoint::random(6, 3, &mut rng)?;
    let x = gaussian_vector(6, &mut rng);
    let single = LrmcProblem::from_dense(&DMatrix::from_column_slice(6, 1, x.as_slice()), 3)?;
    let repeated = LrmcProblem::from_dense(&DMatrix::from_fn(6, 5, |i, _| x[i]), 3)?;
    let mixed = LrmcProblem::from_dense(&gaussian_matrix(6, 20, &mut rng), 3)?;
    let mut out = vec![
        check_fisher_consistency(&single, &u, &[0], seed)?,
        check_fisher_consistency(&repeated, &u, &full_batch(5), seed)?,
        check_fisher_consistency(&mixed, &u, &full_batch(20), seed)?,
    ];
    for r in out.iter_mut() {
        r.check = format!("{}_{}", r.check, r.measurements.iter().find(|m| m.quantity == "batch_size").map_or(0.0, |m| m.value));
    }
    out.push(check_damped_solve(6, 3, seed)?);
    Ok(out)
}

/// Relative residual `‖(F + λI)d + g‖/‖g‖` of the factored and CG solves,
/// recomputed here from a dense assembly.
pub fn check_damped_solve(n: usize, p: usize, seed: u64) -> Result<CheckReport> {
    let mut report = CheckReport::new("damped_solve", seed);
    let mut rng = seeded_rng(seed);
    let u = GrassmannPoint::random(n, p, &mut rng)?;
    let xs = gaussian_matrix(n, 8, &mut rng);
    let prob = LrmcProblem::from_dense(&xs, p)?;
    let fisher: FisherOperator = prob.lrmc_fisher(&u, &full_batch(8))?.into();
    let dense = match &fisher {
        FisherOperator::Kronecker(k) => k.to_dense(&u)?,
        FisherOperator::Dense(d) => d.clone(),
    };
    let g = project(&u, &gaussian_matrix(n, p, &mut rng))?;
    let lambda = 0.3;
    let residual = |d: &TangentVector<GrassmannPoint>| {
        let lhs = dense.matrix() * vec_of(d.mat()) + vec_of(d.mat()) * lambda + vec_of(g.mat());
        lhs.norm() / g.norm()
    };
    for (method, tol, name) in [(SolveMethod::Factored, 1e-10, "factored"), (SolveMethod::Cg, 1e-8, "cg")] {
        let settings = SolverSettings { method, cg_tol: 1e-10, ..SolverSettings::default() };
        let sol = solve_damped(&fisher, lambda, &g, &settings)?;
        report.le(format!("{name}_relative_residual"), residual(&sol.direction), tol);
    }
    let damped = DampedOperator::new(fisher, lambda)?;
    let fd = damped.apply(&g)?;
    report.info("operator_gain", fd.norm() / g.norm());
    Ok(report)
}

// ---------------------------------------------------------------------- KL

/// `E_KL(R_U(t·d)) / (½ t² dᵀF d)` for the Gaussian LRMC model with the exact Fisher.
pub fn kl_ratios(n: usize, p: usize, samples: usize, dirs: usize, t: f64, seed: u64) -> Result<Vec<f64>> {
    let mut rng = seeded_rng(seed);
    let u = GrassmannPoint::random(n, p, &mut rng)?;
    let xs: Vec<_> = (0..samples).map(|_| gaussian_vector(n, &mut rng)).collect();
    let f = exact_gaussian_fisher(&u, &xs)?;
    (0..dirs)
        .map(|_| {
            let d = project(&u, &gaussian_matrix(n, p, &mut rng))?;
            let v = vec_of(d.mat());
            let quad = 0.5 * t * t * v.dot(&(f.matrix() * &v));
            let moved = retract(&u, &d, t, RetractionKind::Polar)?;
            Ok(expected_kl(&u, &moved, &xs) / quad)
        })
        .collect()
}

pub fn check_kl(seed: u64) -> Result<CheckReport> {
    let mut report = CheckReport::new("kl_quadratic_form", seed);
    for (t, tol) in [(1e-2, None), (1e-3, Some(5e-2))] {
        let ratios = kl_ratios(6, 2, 8, 10, t, seed)?;
        let worst = ratios.iter().map(|r| (r - 1.0).abs()).fold(0.0, f64::max);
        match tol {
            Some(tol) => report.le(format!("max_abs_ratio_minus_one_t{t:e}"), worst, tol),
            None => report.info(format!("max_abs_ratio_minus_one_t{t:e}"), worst),
        }
    }
    Ok(report)
}

// -------------------------------------------------------------- beta tail

const BETA_SHARDS: u64 = 64;

/// Monte-Carlo `P(|xᵀv| ≤ γ)` for `v` uniform on the unit sphere in `R^n`,
/// with `x = e₁` by rotation invariance. Shards are fixed, so the estimate
/// does not depend on the thread count.
pub fn beta_tail_estimate(n: usize, gammas: &[f64], trials: u64, seed: u64) -> Vec<f64> {
    let counts: Vec<Vec<u64>> = (0..BETA_SHARDS)
        .into_par_iter()
        .map(|shard| {
            let mut rng = shard_rng(seed, shard);
            let lo = trials * shard / BETA_SHARDS;
            let hi = trials * (shard + 1) / BETA_SHARDS;
            let mut counts = vec![0u64; gammas.len()];
            for _ in lo..hi {
                let z = gaussian_vector(n, &mut rng);
                let c = z[0].abs() / z.norm();
                for (k, &g) in gammas.iter().enumerate() {
                    counts[k] += (c <= g) as u64;
                }
            }
            counts
        })
        .collect();
    (0..gammas.len())
        .map(|k| counts.iter().map(|c| c[k]).sum::<u64>() as f64 / trials as f64)
        .collect()
}

/// `P(|v₁| ≤ γ)` on the circle.
pub fn arcsine_tail(gamma: f64) -> f64 {
    2.0 / std::f64::consts::PI * gamma.min(1.0).asin()
}

/// Bound `P(|xᵀv| ≤ γ) ≤ √(πn)·γ` with a 4σ̂ binomial slack; at `n = 2`
/// the estimate is also compared with the arcsine law.
pub fn check_beta_tail(n: usize, gammas: &[f64], trials: u64, seed: u64) -> Result<CheckReport> {
    if n < 2 || trials < 100_000 {
        return Err(Error::contract(format!("beta tail check needs n ≥ 2 and ≥ 1e5 trials, got n={n}, {trials}")));
    }
    let mut report = CheckReport::new(format!("beta_tail_n{n}"), seed);
    let est = beta_tail_estimate(n, gammas, trials, seed);
    for (&g, &p) in gammas.iter().zip(&est) {
        let sd = (p * (1.0 - p) / trials as f64).sqrt();
        let bound = (std::f64::consts::PI * n as f64).sqrt() * g;
        report.le(format!("p_hat_gamma{g:e}"), p, bound + 4.0 * sd);
        if n == 2 {
            report.le(format!("arcsine_gap_gamma{g:e}"), (p - arcsine_tail(g)).abs(), 4.0 * sd);
        }
    }
    Ok(report)
}

// ---------------------------------------------------- Jacobian stability

/// Sampled estimates of `M = max_i max_u ‖φ_i(u)‖²` and of the Lipschitz
/// constant `L` of `u ↦ φ_i(u)` on the sphere.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PhiConstants {
    pub m: f64,
    pub l: f64,
    /// Ratio of the estimates of `M` from two disjoint halves of the samples.
    pub m_spread: f64,
}

pub fn estimate_phi_constants(v: &DMatrix<f64>, xs: &DMatrix<f64>, samples: usize, seed: u64) -> PhiConstants {
    let n = v.nrows();
    let phi = |u: &DVector<f64>, x: &DVector<f64>| {
        let vu = v * u;
        let q = u.dot(&vu);
        x / q.sqrt() - vu * (u.dot(x) / q.powf(1.5))
    };
    let mut rng = seeded_rng(seed);
    let mut halves = [0.0_f64; 2];
    let mut l: f64 = 0.0;
    for s in 0..samples {
        let u = gaussian_vector(n, &mut rng).normalize();
        let scale = 10f64.powf(-rng.random_range(1.0..4.0));
        let w = (&u + gaussian_vector(n, &mut rng) * scale).normalize();
        let far = gaussian_vector(n, &mut rng).normalize();
        for i in 0..xs.nrows() {
            let x = xs.row(i).transpose();
            let pu = phi(&u, &x);
            halves[s % 2] = halves[s % 2].max(pu.norm_squared());
            for other in [&w, &far] {
                let du = (&u - other).norm();
                if du > 0.0 {
                    l = l.max((&pu - phi(other, &x)).norm() / du);
                }
            }
        }
    }
    let m = halves[0].max(halves[1]);
    PhiConstants { m, l, m_spread: halves[0].max(halves[1]) / halves[0].min(halves[1]) }
}

/// Right-hand side of the high-probability Jacobian stability bound.
pub fn stability_bound(n: usize, big_n: usize, m: usize, q: f64, eps: f64, c: &PhiConstants) -> f64 {
    let common = (std::f64::consts::PI * n as f64).cbrt() * (big_n as f64).powf(5.0 / 3.0) * q.powf(2.0 / 3.0)
        / (eps.powf(2.0 / 3.0) * (m as f64).cbrt());
    common * (2.0 * c.m + c.l)
}

/// `‖J(θ) − J(θ⁰)‖²` for `probes` random points with `‖θ − θ⁰‖ ≤ Q`.
pub fn jacobian_deviation(net: &TwoLayerBnNet, xs: &DMatrix<f64>, theta0: &UnitRowPoint, q: f64, probes: usize, seed: u64) -> Result<Vec<f64>> {
    let j0 = net.jacobian(theta0, xs)?;
    let (m, n) = theta0.shape();
    let mut rng = seeded_rng(seed);
    (0..probes)
        .map(|_| {
            let xi = project(theta0, &gaussian_matrix(m, n, &mut rng))?;
            let moved = if q == 0.0 { theta0.clone() } else { retract(theta0, &xi, q / xi.norm(), RetractionKind::Exponential)? };
            let dist = (moved.matrix() - theta0.matrix()).norm();
            if dist > q * (1.0 + 1e-12) {
                return Err(Error::numerical(format!("probe at distance {dist} exceeds radius {q}")));
            }
            net.jacobian(&moved, xs)?.distance_sq(&j0)
        })
        .collect()
}

#[derive(Clone, Debug)]
pub struct StabilitySettings {
    pub n: usize,
    pub big_n: usize,
    pub widths: Vec<usize>,
    pub q: f64,
    pub probes: usize,
    pub eps: f64,
    pub phi_samples: usize,
}

impl Default for StabilitySettings {
    fn default() -> Self {
        Self { n: 16, big_n: 10, widths: vec![256, 512, 1024, 2048], q: 1.0, probes: 20, eps: 0.1, phi_samples: 4000 }
    }
}

/// Median Jacobian deviation is non-increasing along the width ladder, and
/// every probe stays below the bound with sampled `M`, `L`.
pub fn check_jacobian_stability(s: &StabilitySettings, seed: u64) -> Result<CheckReport> {
    let mut report = CheckReport::new("jacobian_stability", seed);
    let inputs = synth_nn(s.n, s.big_n, 1, seed)?;
    let xs = inputs.xs;
    let mut prev = f64::INFINITY;
    for (k, &m) in s.widths.iter().enumerate() {
        let mut rng = seeded_rng(seed.wrapping_add(1000 + k as u64));
        let theta0 = UnitRowPoint::random(m, s.n, &mut rng)?;
        let a = DVector::from_fn(m, |_, _| if rng.random::<bool>() { 1.0 } else { -1.0 });
        let net = TwoLayerBnNet::with_population_stats(a, s.n)?;
        let consts = estimate_phi_constants(net.covariance(), &xs, s.phi_samples, seed.wrapping_add(2000 + k as u64));
        let bound = stability_bound(s.n, s.big_n, m, s.q, s.eps, &consts);
        let dev = jacobian_deviation(&net, &xs, &theta0, s.q, s.probes, seed.wrapping_add(3000 + k as u64))?;
        let med = median(&dev);
        let worst = dev.iter().cloned().fold(0.0, f64::max);
        report.le(format!("m{m}_max_deviation"), worst, bound);
        report.le(format!("m{m}_median_deviation"), med, prev);
        report.info(format!("m{m}_bound"), bound);
        report.info(format!("m{m}_M_hat"), consts.m);
        report.info(format!("m{m}_L_hat"), consts.l);
        report.info(format!("m{m}_M_spread"), consts.m_spread);
        prev = med;
    }
    Ok(report)
}

// ------------------------------------------------------------------ rates

#[derive(Clone, Debug)]
pub struct RateSettings {
    pub n: usize,
    pub big_n: usize,
    pub m: usize,
    pub steps: usize,
    pub floor: f64,
    /// Targets are moved to `u⁰ + s(y − u⁰)` to shrink the initial residual.
    pub target_scale: f64,
}

impl Default for RateSettings {
    fn default() -> Self {
        Self { n: 16, big_n: 10, m: 4096, steps: 400, floor: 1e-10, target_scale: 1.0 }
    }
}

/// Residual trace of the pseudo-inverse natural step on a random network instance.
pub fn rate_trace(s: &RateSettings, t: f64, seed: u64) -> Result<(Vec<f64>, bool)> {
    let inst = synth_nn(s.n, s.big_n, s.m, seed)?;
    let net = TwoLayerBnNet::with_population_stats(inst.a.clone(), s.n)?;
    let prob = BnProblem::new(net, inst.xs.clone(), inst.ys.clone())?;
    let u0 = prob.outputs(&inst.theta0)?;
    let ys = &u0 + (&inst.ys - &u0) * s.target_scale;
    let prob = prob.with_targets(ys)?;
    let tr = det_rngd_run(&prob, &inst.theta0, t, s.steps, s.floor)?;
    Ok((tr.residuals, tr.ridge.iter().any(|&r| r)))
}

/// `e_{k+1}/e_k` while `e_k` is above the floor.
pub fn contraction_factors(residuals: &[f64], floor: f64) -> Vec<f64> {
    residuals.windows(2).take_while(|w| w[0] > floor).map(|w| w[1] / w[0]).collect()
}

/// Slope of `log e_{k+1}` against `log e_k` over the steps taken while
/// `e_k` was above the floor (the same steps as [`contraction_factors`]).
pub fn contraction_order(residuals: &[f64], floor: f64) -> Option<f64> {
    let pairs: Vec<(f64, f64)> = residuals
        .windows(2)
        .take_while(|w| w[0] > floor)
        .filter(|w| w[1] > 0.0)
        .map(|w| (w[0].ln(), w[1].ln()))
        .collect();
    if pairs.len() < 2 {
        return None;
    }
    let (xs, ys): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
    Some(fit_slope(&xs, &ys))
}

/// Per-step contraction `≤ 1 − t/2 + 1e-3` until the floor, medians over seeds.
pub fn check_linear_rate(s: &RateSettings, t: f64, seeds: &[u64]) -> Result<CheckReport> {
    let mut report = CheckReport::new(format!("linear_rate_t{t}"), seeds.first().copied().unwrap_or(0));
    let mut worst = Vec::new();
    let mut ridge_any = false;
    for &seed in seeds {
        let (res, ridge) = rate_trace(s, t, seed)?;
        ridge_any |= ridge;
        let f = contraction_factors(&res, s.floor);
        worst.push(f.iter().cloned().fold(if t == 0.0 { 1.0 } else { 0.0 }, f64::max));
        if res.last().is_some_and(|&e| e > s.floor) && t > 0.0 {
            report.info(format!("seed{seed}_final_residual"), *res.last().unwrap());
        }
    }
    if ridge_any {
        report.inconclusive = Some("pseudo-inverse needed a ridge".into());
    }
    report.le("median_max_contraction", median(&worst), 1.0 - t / 2.0 + 1e-3);
    report.info("max_contraction_over_seeds", worst.iter().cloned().fold(0.0, f64::max));
    Ok(report)
}

/// Contraction order `≥ 1.8` at `t = 1`, median over seeds.
pub fn check_quadratic_rate(s: &RateSettings, seeds: &[u64]) -> Result<CheckReport> {
    let mut report = CheckReport::new("quadratic_rate", seeds.first().copied().unwrap_or(0));
    let mut orders = Vec::new();
    let mut ridge_any = false;
    for &seed in seeds {
        let (res, ridge) = rate_trace(s, 1.0, seed)?;
        ridge_any |= ridge;
        match contraction_order(&res, s.floor) {
            Some(o) => orders.push(o),
            None => report.info(format!("seed{seed}_too_few_steps"), res.len() as f64),
        }
    }
    if ridge_any {
        report.inconclusive = Some("pseudo-inverse needed a ridge".into());
    }
    if orders.is_empty() {
        report.inconclusive = Some("no seed produced two pre-floor steps".into());
    } else {
        report.ge("median_contraction_order", median(&orders), 1.8);
    }
    Ok(report)
}

// ------------------------------------------------------------------ suites

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Suite {
    Geometry,
    Gradients,
    Fisher,
    Kl,
    Beta,
    Stability,
    Rates,
    All,
}

impl std::str::FromStr for Suite {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "geometry" => Suite::Geometry,
            "gradients" => Suite::Gradients,
            "fisher" => Suite::Fisher,
            "kl" => Suite::Kl,
            "beta" => Suite::Beta,
            "stability" => Suite::Stability,
            "rates" => Suite::Rates,
            "all" => Suite::All,
            other => return Err(Error::Config(format!("unknown suite '{other}'"))),
        })
    }
}

pub const BETA_DIMS: [usize; 4] = [2, 4, 16, 64];
pub const BETA_GAMMAS: [f64; 3] = [1e-3, 1e-2, 1e-1];
pub const BETA_TRIALS: u64 = 1_000_000;

pub fn run_suite(suite: Suite, seed: u64) -> Result<Vec<CheckReport>> {
    let all = suite == Suite::All;
    let mut out = Vec::new();
    if all || suite == Suite::Geometry {
        out.push(check_geometry(20, 4, 20, seed)?);
    }
    if all || suite == Suite::Gradients {
        out.push(check_gradients(10, seed)?);
    }
    if all || suite == Suite::Fisher {
        out.extend(check_fisher_suite(seed)?);
    }
    if all || suite == Suite::Kl {
        out.push(check_kl(seed)?);
    }
    if all || suite == Suite::Beta {
        for n in BETA_DIMS {
            out.push(check_beta_tail(n, &BETA_GAMMAS, BETA_TRIALS, seed)?);
        }
    }
    if all || suite == Suite::Stability {
        out.push(check_jacobian_stability(&StabilitySettings::default(), seed)?);
    }
    if all || suite == Suite::Rates {
        let s = RateSettings::default();
        let seeds: Vec<u64> = (0..5).map(|k| seed.wrapping_add(k)).collect();
        out.push(check_linear_rate(&s, 0.1, &seeds)?);
        out.push(check_quadratic_rate(&s, &seeds)?);
    }
    Ok(out)
}
