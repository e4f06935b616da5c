//! Riemannian natural gradient descent with adaptive damping, a
//! deterministic pseudo-inverse variant, and first-order baselines.
//!
//! One RNGD iteration at `θ` with damping `λ = σ‖g‖`:
//!
//! 1. `d = −(F + λI)⁻¹ g` on the tangent space,
//! 2. trial point `z = R_θ(d)`,
//! 3. `ρ = (Ψ(z) − Ψ(θ)) / (m(d) − Ψ(θ))` with
//!    `m(d) − Ψ(θ) = ⟨g, d⟩ + ½⟨(F + λI)d, d⟩`,
//! 4. accept when `ρ ≥ η₁` and `‖g‖ ≥ η₂/σ`; shrink `σ` by `γ` (floored at
//!    `σ_min`) when `ρ ≥ η₁` and `‖g‖ > η₂/σ`, otherwise grow it by `γ`.

use nalgebra::DVector;
use rand::seq::index::sample;

use crate::error::{Error, Result};
use crate::fisher::{solve_damped, DampedOperator, SolverSettings};
use crate::linalg::{seeded_rng, SeededRng};
use crate::manifold::{inner, project, retract, Manifold, RetractionKind, TangentVector};
use crate::models::{full_batch, ModelProblem, OutputModel};

/// Denominators of the ratio below this magnitude count as a rejection.
pub const DEGENERATE_MODEL_DECREASE: f64 = 1e-14;

#[derive(Clone, Debug)]
pub struct RngdConfig {
    pub sigma0: f64,
    pub sigma_min: f64,
    pub eta1: f64,
    pub eta2: f64,
    pub gamma: f64,
    /// Samples per gradient estimate; `None` uses the full dataset.
    pub grad_batch: Option<usize>,
    /// Samples per Fisher estimate; `None` reuses the gradient batch.
    pub fisher_batch: Option<usize>,
    /// Samples per loss-ratio estimate; `None` matches the gradient batch size.
    pub eval_batch: Option<usize>,
    pub retraction: RetractionKind,
    pub solver: SolverSettings,
    pub max_epochs: usize,
    /// Stop once `‖g‖` falls to this value.
    pub grad_tol: Option<f64>,
    /// Bypass the ratio test and always move to `R_θ(t·d)`.
    pub fixed_step: Option<f64>,
    pub seed: u64,
}

impl Default for RngdConfig {
    fn default() -> Self {
        Self {
            sigma0: 1.0,
            sigma_min: 1e-4,
            eta1: 0.1,
            eta2: 1.0,
            gamma: 2.0,
            grad_batch: None,
            fisher_batch: None,
            eval_batch: None,
            retraction: RetractionKind::Polar,
            solver: SolverSettings::default(),
            max_epochs: 50,
            grad_tol: None,
            fixed_step: None,
            seed: 0,
        }
    }
}

impl RngdConfig {
    pub fn validate(&self) -> Result<()> {
        let pos = |v: f64, name: &str| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::Config(format!("{name} must be positive, got {v}")))
            }
        };
        pos(self.sigma0, "sigma0")?;
        pos(self.sigma_min, "sigma_min")?;
        pos(self.eta2, "eta2")?;
        if !(self.eta1 > 0.0 && self.eta1 < 1.0) {
            return Err(Error::Config(format!("eta1 must lie in (0,1), got {}", self.eta1)));
        }
        if !(self.gamma > 1.0) || !self.gamma.is_finite() {
            return Err(Error::Config(format!("gamma must exceed 1, got {}", self.gamma)));
        }
        for (b, name) in [(self.grad_batch, "grad_batch"), (self.fisher_batch, "fisher_batch"), (self.eval_batch, "eval_batch")] {
            if b == Some(0) {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        if let Some(t) = self.fixed_step {
            pos(t, "fixed step")?;
        }
        if !(self.solver.cg_tol > 0.0) || self.solver.cg_maxit == 0 {
            return Err(Error::Config("CG tolerance and iteration cap must be positive".into()));
        }
        Ok(())
    }

    pub fn acceptance_params(&self) -> AcceptanceParams {
        AcceptanceParams { eta1: self.eta1, eta2: self.eta2, gamma: self.gamma, sigma_min: self.sigma_min }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AcceptanceParams {
    pub eta1: f64,
    pub eta2: f64,
    pub gamma: f64,
    pub sigma_min: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Decision {
    pub accepted: bool,
    pub sigma: f64,
}

/// Step acceptance and the next `σ`.
///
/// Acceptance uses `‖g‖ ≥ η₂/σ` while the decrease of `σ` uses the strict
/// `‖g‖ > η₂/σ`; at equality an accepted step still grows `σ`. A NaN ratio
/// rejects.
pub fn acceptance(rho: f64, grad_norm: f64, sigma: f64, params: &AcceptanceParams) -> Decision {
    let threshold = params.eta2 / sigma;
    let good = rho >= params.eta1;
    let accepted = good && grad_norm >= threshold;
    let shrink = good && grad_norm > threshold;
    let sigma = if shrink { params.sigma_min.max(sigma / params.gamma) } else { params.gamma * sigma };
    Decision { accepted, sigma }
}

#[derive(Clone, Debug)]
pub struct RngdState<P: Manifold> {
    pub point: P,
    pub sigma: f64,
    /// Damping used by the last solve.
    pub lambda: f64,
    pub iteration: usize,
    pub rng: SeededRng,
    pub last_rho: Option<f64>,
    pub history: Vec<bool>,
    /// Per-sample gradient evaluations so far.
    pub grad_evals: usize,
    pub stationary: bool,
    /// Gradient at `point` on the full dataset, kept across rejections.
    cached_full_grad: Option<(f64, TangentVector<P>)>,
}

impl<P: Manifold> RngdState<P> {
    pub fn new(point: P, cfg: &RngdConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            point,
            sigma: cfg.sigma0,
            lambda: f64::NAN,
            iteration: 0,
            rng: seeded_rng(cfg.seed),
            last_rho: None,
            history: Vec::new(),
            grad_evals: 0,
            stationary: false,
            cached_full_grad: None,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepReport {
    pub rho: f64,
    pub grad_norm: f64,
    /// `m(d) − Ψ⁰`.
    pub model_decrease: f64,
    /// `Ψ(z) − Ψ⁰` on the evaluation batch.
    pub estimated_decrease: f64,
    pub accepted: bool,
    pub sigma_before: f64,
    pub sigma_after: f64,
    pub lambda: f64,
    pub solver_converged: bool,
    /// The solve or retraction failed and the step counts as a rejection.
    pub solver_failed: bool,
    /// `|m(d) − Ψ⁰|` was too small to form a ratio.
    pub degenerate: bool,
    pub stationary: bool,
}

fn draw_batch(rng: &mut SeededRng, n: usize, size: Option<usize>) -> Vec<usize> {
    match size {
        Some(b) if b < n => {
            let mut idx = sample(rng, n, b).into_vec();
            idx.sort_unstable();
            idx
        }
        _ => full_batch(n),
    }
}

/// One iteration of RNGD on `state`.
pub fn rngd_step<M: ModelProblem>(problem: &M, state: &mut RngdState<M::Point>, cfg: &RngdConfig) -> Result<StepReport> {
    let n = problem.num_samples();
    let full = cfg.grad_batch.is_none_or(|b| b >= n);
    let sigma_before = state.sigma;
    let (g_batch, (_, g)) = if full {
        let batch = full_batch(n);
        let lg = match state.cached_full_grad.take() {
            Some(c) => c,
            None => {
                state.grad_evals += n;
                problem.loss_grad(&state.point, &batch)?
            }
        };
        (batch, lg)
    } else {
        let batch = draw_batch(&mut state.rng, n, cfg.grad_batch);
        state.grad_evals += batch.len();
        let lg = problem.loss_grad(&state.point, &batch)?;
        (batch, lg)
    };
    state.iteration += 1;
    let grad_norm = g.norm();
    let mut report = StepReport {
        rho: f64::NAN,
        grad_norm,
        model_decrease: 0.0,
        estimated_decrease: 0.0,
        accepted: false,
        sigma_before,
        sigma_after: sigma_before,
        lambda: 0.0,
        solver_converged: true,
        solver_failed: false,
        degenerate: false,
        stationary: false,
    };
    if grad_norm == 0.0 {
        state.stationary = true;
        report.stationary = true;
        state.history.push(false);
        return Ok(report);
    }
    let lambda = state.sigma * grad_norm;
    state.lambda = lambda;
    report.lambda = lambda;

    let f_batch = match cfg.fisher_batch {
        None => g_batch.clone(),
        Some(b) => draw_batch(&mut state.rng, n, Some(b)),
    };
    let e_batch = if full && cfg.eval_batch.is_none_or(|b| b >= n) {
        full_batch(n)
    } else {
        draw_batch(&mut state.rng, n, Some(cfg.eval_batch.unwrap_or(g_batch.len())))
    };

    let attempt = (|| -> Result<(M::Point, f64, bool)> {
        let fisher = problem.fisher(&state.point, &f_batch)?;
        let sol = solve_damped(&fisher, lambda, &g, &cfg.solver)?;
        if !sol.direction.mat().iter().all(|v| v.is_finite()) {
            return Err(Error::numerical("non-finite natural direction"));
        }
        let damped = DampedOperator::new(fisher, lambda)?;
        let fd = damped.apply(&sol.direction)?;
        let md = inner(&g, &sol.direction)? + 0.5 * inner(&fd, &sol.direction)?;
        let t = cfg.fixed_step.unwrap_or(1.0);
        let z = retract(&state.point, &sol.direction, t, cfg.retraction)?;
        Ok((z, md, sol.converged))
    })();

    let (z, md, converged) = match attempt {
        Ok(v) => v,
        Err(Error::Numerical(msg)) | Err(Error::Contract(msg)) => {
            log::warn!("step {} rejected: {msg}", state.iteration);
            report.solver_failed = true;
            report.solver_converged = false;
            if full {
                state.cached_full_grad = Some((f64::NAN, g));
            }
            if cfg.fixed_step.is_none() {
                state.sigma *= cfg.gamma;
            }
            report.sigma_after = state.sigma;
            state.history.push(false);
            return Ok(report);
        }
        Err(e) => return Err(e),
    };
    report.solver_converged = converged;
    report.model_decrease = md;

    if cfg.fixed_step.is_some() {
        state.point = z;
        report.accepted = true;
        state.history.push(true);
        return Ok(report);
    }

    let psi0 = problem.loss(&state.point, &e_batch)?;
    let psiz = problem.loss(&z, &e_batch)?;
    report.estimated_decrease = psiz - psi0;
    let decision = if md.abs() < DEGENERATE_MODEL_DECREASE {
        report.degenerate = true;
        Decision { accepted: false, sigma: cfg.gamma * state.sigma }
    } else {
        let rho = (psiz - psi0) / md;
        report.rho = rho;
        state.last_rho = Some(rho);
        acceptance(rho, grad_norm, state.sigma, &cfg.acceptance_params())
    };
    report.accepted = decision.accepted;
    state.sigma = decision.sigma;
    report.sigma_after = decision.sigma;
    if decision.accepted {
        state.point = z;
    } else if full {
        state.cached_full_grad = Some((f64::NAN, g));
    }
    state.history.push(decision.accepted);
    Ok(report)
}

#[derive(Clone, Debug, PartialEq)]
pub struct TraceRecord {
    pub epoch: usize,
    pub grad_evals_per_n: f64,
    pub train: f64,
    pub test: Option<f64>,
    pub sigma: Option<f64>,
    pub accepted: usize,
}

#[derive(Clone, Debug)]
pub struct RunOutput<P: Manifold> {
    pub trace: Vec<TraceRecord>,
    pub point: P,
    pub reports: Vec<StepReport>,
}

fn record<M: ModelProblem>(
    problem: &M,
    point: &M::Point,
    epoch: usize,
    grad_evals: usize,
    sigma: Option<f64>,
    accepted: usize,
) -> Result<TraceRecord> {
    let m = problem.metrics(point)?;
    if !m.train.is_finite() || m.test.is_some_and(|t| !t.is_finite()) {
        return Err(Error::numerical(format!("non-finite metric at epoch {epoch}")));
    }
    Ok(TraceRecord {
        epoch,
        grad_evals_per_n: grad_evals as f64 / problem.num_samples() as f64,
        train: m.train,
        test: m.test,
        sigma,
        accepted,
    })
}

/// Runs RNGD from `init` (or a random point drawn from the seed) for
/// `cfg.max_epochs` epochs, recording metrics at the end of each epoch.
pub fn rngd_run<M: ModelProblem>(problem: &M, cfg: &RngdConfig, init: Option<M::Point>) -> Result<RunOutput<M::Point>> {
    rngd_run_with(problem, cfg, init, &mut |_| Ok(()))
}

/// As [`rngd_run`], handing each trace record to `sink` as soon as it is produced.
pub fn rngd_run_with<M: ModelProblem>(
    problem: &M,
    cfg: &RngdConfig,
    init: Option<M::Point>,
    sink: &mut dyn FnMut(&TraceRecord) -> Result<()>,
) -> Result<RunOutput<M::Point>> {
    cfg.validate()?;
    let mut init_rng = seeded_rng(cfg.seed.wrapping_add(0x9e37_79b9_7f4a_7c15));
    let point = match init {
        Some(p) => p,
        None => problem.random_point(&mut init_rng)?,
    };
    let mut state = RngdState::new(point, cfg)?;
    let n = problem.num_samples();
    let mut trace = Vec::with_capacity(cfg.max_epochs);
    let mut reports = Vec::new();
    let mut accepted = 0;
    let mut epoch = 0;
    // A run that stalls on rejections of a cached full gradient still terminates.
    let max_idle = 200;
    let mut idle = 0;
    while epoch < cfg.max_epochs {
        let before = state.grad_evals;
        let rep = rngd_step(problem, &mut state, cfg)?;
        accepted += rep.accepted as usize;
        let done = rep.stationary || cfg.grad_tol.is_some_and(|tol| rep.grad_norm <= tol);
        reports.push(rep);
        idle = if state.grad_evals == before { idle + 1 } else { 0 };
        while epoch < cfg.max_epochs && (state.grad_evals >= (epoch + 1) * n || done || idle > max_idle) {
            epoch += 1;
            let rec = record(problem, &state.point, epoch, state.grad_evals, Some(state.sigma), accepted)?;
            sink(&rec)?;
            trace.push(rec);
            if !(done || idle > max_idle) {
                break;
            }
        }
        if done || idle > max_idle {
            break;
        }
    }
    Ok(RunOutput { trace, point: state.point, reports })
}

/// Result of one pseudo-inverse natural step.
#[derive(Clone, Debug)]
pub struct DetStep<P: Manifold> {
    pub point: P,
    /// `‖u(θ) − y‖` before the step.
    pub residual: f64,
    /// A ridge was added because `JJᵀ` was ill-conditioned.
    pub ridge: bool,
}

/// Condition number above which `JJᵀ` is ridge-regularized.
pub const PINV_COND_LIMIT: f64 = 1e12;

/// `θ⁺ = Exp_θ(−t·Jᵀ(JJᵀ)⁻¹(u(θ) − y))` for the square loss.
pub fn deterministic_rngd_step<M: OutputModel>(model: &M, point: &M::Point, t: f64) -> Result<DetStep<M::Point>> {
    if !t.is_finite() || t < 0.0 {
        return Err(Error::contract(format!("step size must be finite and nonnegative, got {t}")));
    }
    let u = model.outputs(point)?;
    let r = &u - model.targets();
    let residual = r.norm();
    if t == 0.0 || residual == 0.0 {
        return Ok(DetStep { point: point.clone(), residual, ridge: false });
    }
    let jac = model.jacobian(point)?;
    let (coef, ridge) = pinv_coefficients(&jac.gram(), &r)?;
    let d = jac.adjoint(&coef)?;
    let next = retract(point, &d, -t, RetractionKind::Exponential)?;
    Ok(DetStep { point: next, residual, ridge })
}

/// Solves `(JJᵀ) c = r`, adding `1e-10·tr(JJᵀ)/N` to the diagonal when the
/// condition number exceeds [`PINV_COND_LIMIT`].
fn pinv_coefficients(gram: &nalgebra::DMatrix<f64>, r: &DVector<f64>) -> Result<(DVector<f64>, bool)> {
    let eig = gram.clone().symmetric_eigen();
    let max = eig.eigenvalues.iter().fold(0.0_f64, |a, &v| a.max(v));
    let min = eig.eigenvalues.iter().fold(f64::INFINITY, |a, &v| a.min(v));
    if !(max > 0.0) {
        return Err(Error::numerical("Jacobian vanishes"));
    }
    let mut sys = gram.clone();
    let ridge = !(min > max / PINV_COND_LIMIT);
    if ridge {
        let shift = 1e-10 * gram.trace() / gram.nrows() as f64;
        log::warn!("JJᵀ ill-conditioned (λ_min {min:e}, λ_max {max:e}); adding ridge {shift:e}");
        for i in 0..sys.nrows() {
            sys[(i, i)] += shift;
        }
    }
    let chol = sys.cholesky().ok_or_else(|| Error::numerical("JJᵀ is not positive definite"))?;
    Ok((chol.solve(r), ridge))
}

#[derive(Clone, Debug)]
pub struct DetTrace<P: Manifold> {
    /// `‖u^k − y‖` for `k = 0..=steps`.
    pub residuals: Vec<f64>,
    pub ridge: Vec<bool>,
    pub point: P,
}

/// Repeats [`deterministic_rngd_step`] `steps` times, stopping once the residual drops to `floor`.
pub fn det_rngd_run<M: OutputModel>(model: &M, init: &M::Point, t: f64, steps: usize, floor: f64) -> Result<DetTrace<M::Point>> {
    let mut point = init.clone();
    let mut residuals = Vec::with_capacity(steps + 1);
    let mut ridge = Vec::with_capacity(steps);
    for _ in 0..steps {
        let step = deterministic_rngd_step(model, &point, t)?;
        residuals.push(step.residual);
        if step.residual <= floor {
            break;
        }
        ridge.push(step.ridge);
        point = step.point;
    }
    if residuals.len() == ridge.len() {
        residuals.push((model.outputs(&point)? - model.targets()).norm());
    }
    Ok(DetTrace { residuals, ridge, point })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StepSchedule {
    /// `η_k = η₀ / (1 + η₀k/10)`.
    Decaying,
    Constant,
}

/// Settings shared by the first-order baselines.
#[derive(Clone, Debug)]
pub struct BaselineConfig {
    pub step: f64,
    pub schedule: StepSchedule,
    /// `None` uses the full dataset.
    pub batch: Option<usize>,
    pub retraction: RetractionKind,
    pub max_epochs: usize,
    pub seed: u64,
    /// RSVRG inner iterations per outer iteration; `None` gives `⌈N/batch⌉`.
    pub inner_iters: Option<usize>,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        Self {
            step: 0.1,
            schedule: StepSchedule::Decaying,
            batch: None,
            retraction: RetractionKind::Polar,
            max_epochs: 50,
            seed: 0,
            inner_iters: None,
        }
    }
}

impl BaselineConfig {
    fn validate(&self) -> Result<()> {
        if !(self.step > 0.0) || !self.step.is_finite() {
            return Err(Error::Config(format!("step size must be positive, got {}", self.step)));
        }
        if self.batch == Some(0) || self.inner_iters == Some(0) {
            return Err(Error::Config("batch and inner iteration counts must be positive".into()));
        }
        Ok(())
    }

    pub fn step_at(&self, k: usize) -> f64 {
        match self.schedule {
            StepSchedule::Decaying => rsgd_step_size(self.step, k),
            StepSchedule::Constant => self.step,
        }
    }
}

pub fn rsgd_step_size(eta0: f64, k: usize) -> f64 {
    eta0 / (1.0 + eta0 * k as f64 / 10.0)
}

/// `R_θ(−η ĝ)`.
pub fn rsgd_step<P: Manifold>(point: &P, grad: &TangentVector<P>, eta: f64, kind: RetractionKind) -> Result<P> {
    retract(point, grad, -eta, kind)
}

fn init_point<M: ModelProblem>(problem: &M, seed: u64, init: Option<M::Point>) -> Result<M::Point> {
    match init {
        Some(p) => Ok(p),
        None => problem.random_point(&mut seeded_rng(seed.wrapping_add(0x9e37_79b9_7f4a_7c15))),
    }
}

/// Riemannian stochastic gradient descent; with the full batch and a
/// constant schedule this is Riemannian gradient descent.
pub fn rsgd_run<M: ModelProblem>(problem: &M, cfg: &BaselineConfig, init: Option<M::Point>) -> Result<RunOutput<M::Point>> {
    rsgd_run_with(problem, cfg, init, &mut |_| Ok(()))
}

/// As [`rsgd_run`], handing each trace record to `sink` as soon as it is produced.
pub fn rsgd_run_with<M: ModelProblem>(
    problem: &M,
    cfg: &BaselineConfig,
    init: Option<M::Point>,
    sink: &mut dyn FnMut(&TraceRecord) -> Result<()>,
) -> Result<RunOutput<M::Point>> {
    cfg.validate()?;
    let mut point = init_point(problem, cfg.seed, init)?;
    let mut rng = seeded_rng(cfg.seed);
    let n = problem.num_samples();
    let mut trace = Vec::with_capacity(cfg.max_epochs);
    let mut evals = 0;
    let mut k = 0;
    for epoch in 1..=cfg.max_epochs {
        while evals < epoch * n {
            let batch = draw_batch(&mut rng, n, cfg.batch);
            evals += batch.len();
            let (_, g) = problem.loss_grad(&point, &batch)?;
            point = rsgd_step(&point, &g, cfg.step_at(k), cfg.retraction)?;
            k += 1;
        }
        let rec = record(problem, &point, epoch, evals, None, k)?;
        sink(&rec)?;
        trace.push(rec);
    }
    Ok(RunOutput { trace, point, reports: Vec::new() })
}

/// Riemannian SVRG; the stored full gradient and the snapshot batch
/// gradient are moved to the current tangent space by projection.
pub fn rsvrg_run<M: ModelProblem>(problem: &M, cfg: &BaselineConfig, init: Option<M::Point>) -> Result<RunOutput<M::Point>> {
    rsvrg_run_with(problem, cfg, init, &mut |_| Ok(()))
}

/// As [`rsvrg_run`], handing each trace record to `sink` as soon as it is produced.
pub fn rsvrg_run_with<M: ModelProblem>(
    problem: &M,
    cfg: &BaselineConfig,
    init: Option<M::Point>,
    sink: &mut dyn FnMut(&TraceRecord) -> Result<()>,
) -> Result<RunOutput<M::Point>> {
    cfg.validate()?;
    let mut point = init_point(problem, cfg.seed, init)?;
    let mut rng = seeded_rng(cfg.seed);
    let n = problem.num_samples();
    let b = cfg.batch.unwrap_or(n).min(n);
    let inner_iters = cfg.inner_iters.unwrap_or(n.div_ceil(b));
    let mut trace = Vec::with_capacity(cfg.max_epochs);
    let mut evals = 0;
    let mut k = 0;
    for outer in 1..=cfg.max_epochs {
        let snapshot = point.clone();
        let (_, full) = problem.loss_grad(&snapshot, &full_batch(n))?;
        evals += n;
        for _ in 0..inner_iters {
            let batch = draw_batch(&mut rng, n, Some(b));
            evals += 2 * batch.len();
            let (_, g_now) = problem.loss_grad(&point, &batch)?;
            let (_, g_snap) = problem.loss_grad(&snapshot, &batch)?;
            let correction = point.project_ambient(&(full.mat() - g_snap.mat()));
            let v = TangentVector::new(&point, g_now.mat() + correction)?;
            point = rsgd_step(&point, &v, cfg.step_at(k), cfg.retraction)?;
            k += 1;
        }
        let rec = record(problem, &point, outer, evals, None, k)?;
        sink(&rec)?;
        trace.push(rec);
    }
    Ok(RunOutput { trace, point, reports: Vec::new() })
}

/// Armijo sufficient-decrease constant for RCG.
pub const ARMIJO_C: f64 = 1e-4;

/// Full-batch Riemannian conjugate gradients with the Hestenes–Stiefel+
/// rule, projection transport and Armijo backtracking. One trace record per iteration.
pub fn rcg_run<M: ModelProblem>(problem: &M, cfg: &BaselineConfig, init: Option<M::Point>) -> Result<RunOutput<M::Point>> {
    rcg_run_with(problem, cfg, init, &mut |_| Ok(()))
}

/// As [`rcg_run`], handing each trace record to `sink` as soon as it is produced.
pub fn rcg_run_with<M: ModelProblem>(
    problem: &M,
    cfg: &BaselineConfig,
    init: Option<M::Point>,
    sink: &mut dyn FnMut(&TraceRecord) -> Result<()>,
) -> Result<RunOutput<M::Point>> {
    cfg.validate()?;
    let mut point = init_point(problem, cfg.seed, init)?;
    let n = problem.num_samples();
    let all = full_batch(n);
    let (mut loss, mut g) = problem.loss_grad(&point, &all)?;
    let mut evals = n;
    let mut dir = g.scaled(-1.0);
    let mut step = cfg.step;
    let mut trace = Vec::with_capacity(cfg.max_epochs);
    for epoch in 1..=cfg.max_epochs {
        let slope = inner(&g, &dir)?;
        if g.norm() == 0.0 || slope >= 0.0 {
            {
                let rec = record(problem, &point, epoch, evals, None, epoch)?;
                sink(&rec)?;
                trace.push(rec);
            }
            dir = g.scaled(-1.0);
            continue;
        }
        let mut t = (2.0 * step).min(1e6);
        let mut moved = None;
        for _ in 0..60 {
            let cand = retract(&point, &dir, t, cfg.retraction)?;
            let cand_loss = problem.loss(&cand, &all)?;
            if cand_loss <= loss + ARMIJO_C * t * slope {
                moved = Some((cand, cand_loss));
                break;
            }
            t *= 0.5;
        }
        if let Some((cand, _)) = moved {
            step = t;
            let (new_loss, new_g) = problem.loss_grad(&cand, &full_batch(n))?;
            evals += n;
            let old_g = project(&cand, g.mat())?;
            let old_dir = project(&cand, dir.mat())?;
            let y = new_g.add_scaled(&old_g, -1.0)?;
            let denom = inner(&old_dir, &y)?;
            let beta = if denom.abs() > 0.0 { (inner(&new_g, &y)? / denom).max(0.0) } else { 0.0 };
            let mut next = new_g.scaled(-1.0).add_scaled(&old_dir, beta)?;
            if inner(&next, &new_g)? >= 0.0 {
                next = new_g.scaled(-1.0);
            }
            point = cand;
            loss = new_loss;
            g = new_g;
            dir = next;
        } else {
            dir = g.scaled(-1.0);
        }
        {
                let rec = record(problem, &point, epoch, evals, None, epoch)?;
                sink(&rec)?;
                trace.push(rec);
            }
    }
    Ok(RunOutput { trace, point, reports: Vec::new() })
}
