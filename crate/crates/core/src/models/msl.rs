//! Multi-task regression with a shared latent subspace.
//!
//! Task `i` has design `X_i` (`d_i×n`) and response `y_i`. Given a subspace
//! `U ∈ Gr(n, p)` each task fits ridge weights `w_i` on the features `X_i U`
//! from the stationarity condition `UᵀXᵀ(XUw − y) + λw = 0`, and the
//! objective is `Ψ(U) = (1/2N) Σ ‖X_i U w_i − y_i‖²`.

use nalgebra::{DMatrix, DVector};

use super::{check_batch, map_batch, Metrics, ModelProblem};
use crate::data::MslTask;
use crate::error::{Error, Result};
use crate::fisher::{Factor, FisherOperator, KroneckerFisher, ProjectorSide};
use crate::linalg::{symmetrize, SeededRng};
use crate::manifold::{GrassmannPoint, Manifold, TangentVector};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum GradientMode {
    /// Differentiates through the ridge solution `w(U)`.
    #[default]
    Exact,
    /// Treats `w` as fixed: `(I − UUᵀ) Xᵀ (XUw − y) wᵀ`.
    Approximate,
}

struct TaskFit {
    z: DMatrix<f64>,
    w: DVector<f64>,
    r: DVector<f64>,
    chol: nalgebra::Cholesky<f64, nalgebra::Dyn>,
}

fn fit(u: &GrassmannPoint, task: &MslTask, lambda: f64) -> Result<TaskFit> {
    if task.x.ncols() != u.n() || task.x.nrows() != task.y.len() {
        return Err(Error::dim(format!(
            "task design {:?} with {} responses for dimension {}",
            task.x.shape(),
            task.y.len(),
            u.n()
        )));
    }
    let z = &task.x * u.matrix();
    let p = u.p();
    let m = z.transpose() * &z + DMatrix::identity(p, p) * lambda;
    let chol = m.cholesky().ok_or_else(|| Error::numerical("ridge system is not positive definite"))?;
    let w = chol.solve(&(z.transpose() * &task.y));
    let r = &z * &w - &task.y;
    Ok(TaskFit { z, w, r, chol })
}

/// Ridge weights `(UᵀXᵀXU + λI)⁻¹ UᵀXᵀy`.
pub fn msl_coeffs(u: &GrassmannPoint, task: &MslTask, lambda: f64) -> Result<DVector<f64>> {
    if !(lambda > 0.0) {
        return Err(Error::contract(format!("ridge parameter must be positive, got {lambda}")));
    }
    Ok(fit(u, task, lambda)?.w)
}

#[derive(Clone, Debug)]
pub struct SubspaceLearningProblem {
    n: usize,
    p: usize,
    lambda: f64,
    train: Vec<MslTask>,
    test: Option<Vec<MslTask>>,
    mode: GradientMode,
}

impl SubspaceLearningProblem {
    pub fn new(p: usize, lambda: f64, train: Vec<MslTask>, test: Option<Vec<MslTask>>) -> Result<Self> {
        if !(lambda > 0.0) || !lambda.is_finite() {
            return Err(Error::contract(format!("ridge parameter must be positive, got {lambda}")));
        }
        let n = train.first().ok_or_else(|| Error::contract("no tasks"))?.x.ncols();
        if p == 0 || n < p {
            return Err(Error::contract(format!("invalid rank {p} for dimension {n}")));
        }
        for t in train.iter().chain(test.iter().flatten()) {
            if t.x.ncols() != n || t.x.nrows() != t.y.len() {
                return Err(Error::dim("inconsistent task shapes"));
            }
        }
        if let Some(t) = &test {
            if t.len() != train.len() {
                return Err(Error::dim("test tasks must align with training tasks"));
            }
        }
        Ok(Self { n, p, lambda, train, test, mode: GradientMode::Exact })
    }

    pub fn with_mode(mut self, mode: GradientMode) -> Self {
        self.mode = mode;
        self
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn p(&self) -> usize {
        self.p
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    fn check_point(&self, u: &GrassmannPoint) -> Result<()> {
        if u.shape() != (self.n, self.p) {
            return Err(Error::dim(format!("point {:?} for a {}x{} problem", u.shape(), self.n, self.p)));
        }
        Ok(())
    }

    /// Loss, Riemannian gradient (in the configured mode) and Kronecker Fisher on `batch`.
    pub fn msl_loss_grad_fisher(
        &self,
        u: &GrassmannPoint,
        batch: &[usize],
    ) -> Result<(f64, TangentVector<GrassmannPoint>, KroneckerFisher)> {
        let (loss, grad) = self.loss_grad(u, batch)?;
        let fisher = self.kron_fisher(u, batch)?;
        Ok((loss, grad, fisher))
    }

    pub fn kron_fisher(&self, u: &GrassmannPoint, batch: &[usize]) -> Result<KroneckerFisher> {
        self.check_point(u)?;
        check_batch(batch, self.train.len())?;
        let um = u.matrix();
        let parts = map_batch(batch, |i| {
            let task = &self.train[i];
            let w = fit(u, task, self.lambda)?.w;
            let xb = &task.x - (&task.x * um) * um.transpose();
            Ok((w.clone() * w.transpose(), xb.transpose() * xb))
        })?;
        let b = batch.len() as f64;
        let mut a = DMatrix::zeros(self.p, self.p);
        let mut g = DMatrix::zeros(self.n, self.n);
        for (wa, gb) in &parts {
            a += wa;
            g += gb;
        }
        KroneckerFisher::new(symmetrize(&(a / b)), Factor::Dense(symmetrize(&(g / b))), ProjectorSide::Left)
    }

    fn nmse(&self, u: &GrassmannPoint, eval: &[MslTask]) -> Result<f64> {
        let all = super::full_batch(self.train.len());
        let per = map_batch(&all, |i| {
            let task = &eval[i];
            if task.y.norm_squared() == 0.0 {
                return Ok(None);
            }
            let w = fit(u, &self.train[i], self.lambda)?.w;
            let r = &task.x * (u.matrix() * w) - &task.y;
            Ok(Some(r.norm_squared() / task.y.norm_squared()))
        })?;
        let skipped = per.iter().filter(|v| v.is_none()).count();
        if skipped > 0 {
            log::warn!("{skipped} tasks with zero response excluded from NMSE");
        }
        let vals: Vec<f64> = per.into_iter().flatten().collect();
        if vals.is_empty() {
            return Err(Error::Data("no task with a nonzero response".into()));
        }
        Ok(vals.iter().sum::<f64>() / vals.len() as f64)
    }
}

impl ModelProblem for SubspaceLearningProblem {
    type Point = GrassmannPoint;

    fn num_samples(&self) -> usize {
        self.train.len()
    }

    fn loss(&self, point: &GrassmannPoint, batch: &[usize]) -> Result<f64> {
        self.check_point(point)?;
        check_batch(batch, self.train.len())?;
        let parts = map_batch(batch, |i| Ok(0.5 * fit(point, &self.train[i], self.lambda)?.r.norm_squared()))?;
        Ok(parts.iter().sum::<f64>() / batch.len() as f64)
    }

    fn loss_grad(&self, point: &GrassmannPoint, batch: &[usize]) -> Result<(f64, TangentVector<GrassmannPoint>)> {
        self.check_point(point)?;
        check_batch(batch, self.train.len())?;
        let parts = map_batch(batch, |i| {
            let task = &self.train[i];
            let f = fit(point, task, self.lambda)?;
            let gz = match self.mode {
                GradientMode::Approximate => &f.r * f.w.transpose(),
                GradientMode::Exact => {
                    // w = M⁻¹Zᵀy with M = ZᵀZ + λI; s = M⁻¹Zᵀr carries dw.
                    let s = f.chol.solve(&(f.z.transpose() * &f.r));
                    &f.r * f.w.transpose() - &f.r * s.transpose() - (&f.z * s) * f.w.transpose()
                }
            };
            Ok((0.5 * f.r.norm_squared(), task.x.transpose() * gz))
        })?;
        let b = batch.len() as f64;
        let mut loss = 0.0;
        let mut g = DMatrix::zeros(self.n, self.p);
        for (l, gi) in &parts {
            loss += l;
            g += gi;
        }
        g /= b;
        Ok((loss / b, TangentVector::new(point, point.project_ambient(&g))?))
    }

    fn fisher(&self, point: &GrassmannPoint, batch: &[usize]) -> Result<FisherOperator> {
        Ok(self.kron_fisher(point, batch)?.into())
    }

    /// Mean normalized squared error over tasks.
    fn metrics(&self, point: &GrassmannPoint) -> Result<Metrics> {
        self.check_point(point)?;
        let train = self.nmse(point, &self.train)?;
        let test = match &self.test {
            Some(t) => Some(self.nmse(point, t)?),
            None => None,
        };
        Ok(Metrics { train, test })
    }

    fn random_point(&self, rng: &mut SeededRng) -> Result<GrassmannPoint> {
        GrassmannPoint::random(self.n, self.p, rng)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth_msl;
    use crate::fisher::apply;
    use crate::linalg::{gaussian_matrix, gaussian_vector, orthonormalize, seeded_rng};
    use crate::manifold::{inner, project, retract, RetractionKind};
    use crate::models::full_batch;

    #[test]
    fn zero_response_gives_zero_weights() {
        let mut rng = seeded_rng(50);
        let u = GrassmannPoint::random(4, 2, &mut rng).unwrap();
        let task = MslTask { x: gaussian_matrix(6, 4, &mut rng), y: DVector::zeros(6) };
        assert_eq!(msl_coeffs(&u, &task, 0.5).unwrap().norm(), 0.0);
        assert!(msl_coeffs(&u, &task, 0.0).is_err());
    }

    #[test]
    fn small_ridge_limit_on_orthonormal_features() {
        let mut rng = seeded_rng(51);
        let u = GrassmannPoint::random(5, 2, &mut rng).unwrap();
        let q = orthonormalize(&gaussian_matrix(7, 2, &mut rng)).unwrap();
        let x = &q * u.matrix().transpose();
        let y = gaussian_vector(7, &mut rng);
        let w = msl_coeffs(&u, &MslTask { x, y: y.clone() }, 1e-12).unwrap();
        assert!((w - q.transpose() * y).norm() < 1e-10);
    }

    #[test]
    fn weights_match_dense_solve_of_printed_stationarity() {
        let mut rng = seeded_rng(52);
        let u = GrassmannPoint::random(4, 2, &mut rng).unwrap();
        let x = gaussian_matrix(5, 4, &mut rng);
        let y = gaussian_vector(5, &mut rng);
        let lambda = 0.3;
        let w = msl_coeffs(&u, &MslTask { x: x.clone(), y: y.clone() }, lambda).unwrap();
        let z = &x * u.matrix();
        let sys = z.transpose() * &z + DMatrix::identity(2, 2) * lambda;
        let oracle = sys.lu().solve(&(z.transpose() * &y)).unwrap();
        assert!((&w - oracle).norm() < 1e-12);
        let stationarity = z.transpose() * (&z * &w - &y) + &w * lambda;
        assert!(stationarity.norm() < 1e-12);
    }

    #[test]
    fn consistent_tasks_reach_zero_loss() {
        let s = synth_msl(8, 2, 4, 10, 0.0, 53).unwrap();
        let prob = SubspaceLearningProblem::new(2, 1e-12, s.tasks, None).unwrap();
        assert!(prob.loss(&s.truth, &full_batch(4)).unwrap() < 1e-18);
    }

    #[test]
    fn exact_gradient_matches_central_differences() {
        let s = synth_msl(6, 2, 5, 8, 0.3, 54).unwrap();
        let prob = SubspaceLearningProblem::new(2, 0.7, s.tasks, None).unwrap();
        let mut rng = seeded_rng(55);
        let u = GrassmannPoint::random(6, 2, &mut rng).unwrap();
        let batch = full_batch(5);
        let (_, g) = prob.loss_grad(&u, &batch).unwrap();
        let approx = prob.clone().with_mode(GradientMode::Approximate).loss_grad(&u, &batch).unwrap().1;
        assert!((g.mat() - approx.mat()).norm() > 1e-6, "modes should differ for λ > 0");
        for _ in 0..10 {
            let xi = project(&u, &gaussian_matrix(6, 2, &mut rng)).unwrap();
            let xi = xi.scaled(1.0 / xi.norm());
            let h = f64::EPSILON.cbrt();
            let plus = prob.loss(&retract(&u, &xi, h, RetractionKind::Polar).unwrap(), &batch).unwrap();
            let minus = prob.loss(&retract(&u, &xi, -h, RetractionKind::Polar).unwrap(), &batch).unwrap();
            let fd = (plus - minus) / (2.0 * h);
            let an = inner(&g, &xi).unwrap();
            assert!((fd - an).abs() <= 1e-5 * an.abs().max(g.norm()), "fd {fd} analytic {an}");
        }
    }

    #[test]
    fn fisher_left_factor_annihilates_subspace() {
        let s = synth_msl(6, 2, 5, 8, 0.3, 56).unwrap();
        let prob = SubspaceLearningProblem::new(2, 0.5, s.tasks, None).unwrap();
        let mut rng = seeded_rng(57);
        let u = GrassmannPoint::random(6, 2, &mut rng).unwrap();
        let k = prob.kron_fisher(&u, &full_batch(5)).unwrap();
        let g = k.g_factor().to_dense();
        assert!((&g * u.matrix()).norm() < 1e-12);
        assert!(crate::linalg::min_sym_eigenvalue(&g) > -1e-10);
        let op: FisherOperator = k.into();
        for _ in 0..50 {
            let h = project(&u, &gaussian_matrix(6, 2, &mut rng)).unwrap();
            assert!(inner(&apply(&op, &h).unwrap(), &h).unwrap() >= -1e-12);
        }
    }

    #[test]
    fn nmse_skips_zero_tasks() {
        let mut s = synth_msl(6, 2, 3, 8, 0.0, 58).unwrap();
        s.tasks[1].y = DVector::zeros(8);
        let prob = SubspaceLearningProblem::new(2, 1e-12, s.tasks, None).unwrap();
        let m = prob.metrics(&s.truth).unwrap();
        assert!(m.train < 1e-18);
    }
}
