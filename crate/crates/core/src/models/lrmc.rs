//! Low-rank matrix completion as subspace fitting on Gr(n, p).
//!
//! Each sample is a partially observed vector `x_i ∈ R^n`. For a subspace
//! `U` the coefficients `a(U; x)` solve the least-squares problem on the
//! observed rows, and the objective is
//! `Ψ(U) = (1/2N) Σ ‖P_Ω(U a(U; x_i) − x_i)‖²`.

use nalgebra::{DMatrix, DVector};

use super::{check_batch, map_batch, Metrics, ModelProblem};
use crate::data::RatingDataset;
use crate::error::{Error, Result};
use crate::fisher::{exact_refim, DenseFisher, Factor, FisherOperator, KroneckerFisher, ProjectorSide};
use crate::linalg::{solve_psd, SeededRng};
use crate::manifold::{GrassmannPoint, Manifold, TangentVector};

/// Observed entries of one sample vector, sorted by row.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ObservedColumn {
    pub rows: Vec<usize>,
    pub values: Vec<f64>,
}

impl ObservedColumn {
    pub fn new(mut pairs: Vec<(usize, f64)>) -> Result<Self> {
        pairs.sort_by_key(|e| e.0);
        if pairs.windows(2).any(|w| w[0].0 == w[1].0) {
            return Err(Error::Data("repeated row in observed column".into()));
        }
        Ok(Self {
            rows: pairs.iter().map(|e| e.0).collect(),
            values: pairs.iter().map(|e| e.1).collect(),
        })
    }

    pub fn full(x: &DVector<f64>) -> Self {
        Self { rows: (0..x.len()).collect(), values: x.iter().copied().collect() }
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }
}

/// Which axis of a rating matrix indexes samples.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum SampleAxis {
    /// Each row (e.g. a user) is one sample; the ambient dimension is the column count.
    #[default]
    Rows,
    /// Each column is one sample.
    Columns,
}

#[derive(Clone, Debug)]
pub struct Coefficients {
    pub a: DVector<f64>,
    /// Set when the observed block was rank deficient and the minimum-norm solution was used.
    pub rank_deficient: bool,
}

/// Least-squares coefficients of `x` on the observed rows of `U`.
pub fn lrmc_coeffs(u: &GrassmannPoint, col: &ObservedColumn) -> Result<Coefficients> {
    if col.is_empty() {
        return Err(Error::contract("column has no observed entries"));
    }
    let n = u.n();
    if let Some(&r) = col.rows.iter().find(|&&r| r >= n) {
        return Err(Error::dim(format!("observed row {r} outside dimension {n}")));
    }
    let u_obs = u.matrix().select_rows(col.rows.iter());
    let x_obs = DMatrix::from_column_slice(col.len(), 1, &col.values);
    let normal = u_obs.transpose() * &u_obs;
    let rhs = u_obs.transpose() * x_obs;
    let (a, fallback) = solve_psd(&normal, &rhs);
    Ok(Coefficients { a: a.column(0).into_owned(), rank_deficient: fallback || col.len() < u.p() })
}

fn coeffs_or_zero(u: &GrassmannPoint, col: &ObservedColumn) -> Result<DVector<f64>> {
    if col.is_empty() {
        Ok(DVector::zeros(u.p()))
    } else {
        Ok(lrmc_coeffs(u, col)?.a)
    }
}

/// Residual `U_Ω a − x_Ω` on the rows of `col`.
fn residual(u: &GrassmannPoint, a: &DVector<f64>, col: &ObservedColumn) -> DVector<f64> {
    let m = u.matrix();
    DVector::from_iterator(
        col.len(),
        col.rows.iter().zip(&col.values).map(|(&r, &v)| m.row(r).transpose().dot(a) - v),
    )
}

/// Riemannian gradient of `½‖U a(U; x) − x − y‖²` for a fully observed `x`.
///
/// `a(U; x) = Uᵀx` depends on `U`, which produces the second term
/// `(I − UUᵀ) x (Ua − x − y)ᵀ U`.
pub fn lrmc_sample_grad(u: &GrassmannPoint, x: &DVector<f64>, y: &DVector<f64>) -> Result<TangentVector<GrassmannPoint>> {
    let n = u.n();
    if x.len() != n || y.len() != n {
        return Err(Error::dim(format!("sample vectors must have length {n}")));
    }
    let um = u.matrix();
    let a = um.transpose() * x;
    let r = um * &a - x - y;
    let first = &r * a.transpose();
    let second = x * (r.transpose() * um);
    TangentVector::new(u, u.project_ambient(&(first + second)))
}

/// `f(x, U) = UUᵀx − x`, the mean of the conditional Gaussian model.
pub fn gaussian_mean(u: &GrassmannPoint, x: &DVector<f64>) -> DVector<f64> {
    let um = u.matrix();
    um * (um.transpose() * x) - x
}

/// Exact empirical Fisher of the Gaussian model `y ~ N(f(x, U), I)`.
///
/// The expectation over `y` is taken exactly by using the `2n` residual
/// directions `±√n e_k`, whose second moment is the identity.
pub fn exact_gaussian_fisher(u: &GrassmannPoint, xs: &[DVector<f64>]) -> Result<DenseFisher> {
    let n = u.n();
    let scale = (n as f64).sqrt();
    let mut samples = Vec::with_capacity(xs.len() * n);
    for x in xs {
        let f = gaussian_mean(u, x);
        for k in 0..n {
            let mut y = f.clone();
            y[k] -= 1.0;
            samples.push(lrmc_sample_grad(u, x, &y)?.scaled(scale));
        }
    }
    exact_refim(&samples)
}

/// `(1/N) Σ KL(N(f(x_i, U), I) ‖ N(f(x_i, V), I))`.
pub fn expected_kl(u: &GrassmannPoint, v: &GrassmannPoint, xs: &[DVector<f64>]) -> f64 {
    let total: f64 = xs.iter().map(|x| 0.5 * (gaussian_mean(v, x) - gaussian_mean(u, x)).norm_squared()).sum();
    total / xs.len() as f64
}

#[derive(Clone, Debug)]
pub struct LrmcProblem {
    n: usize,
    p: usize,
    train: Vec<ObservedColumn>,
    test: Option<Vec<ObservedColumn>>,
    train_count: usize,
    test_count: usize,
}

impl LrmcProblem {
    pub fn new(n: usize, p: usize, train: Vec<ObservedColumn>, test: Option<Vec<ObservedColumn>>) -> Result<Self> {
        if p == 0 || n < p {
            return Err(Error::contract(format!("invalid rank {p} for dimension {n}")));
        }
        if train.is_empty() {
            return Err(Error::contract("no samples"));
        }
        if let Some(t) = &test {
            if t.len() != train.len() {
                return Err(Error::dim("test columns must align with training columns"));
            }
        }
        for col in train.iter().chain(test.iter().flatten()) {
            if col.rows.len() != col.values.len() {
                return Err(Error::dim("observed rows and values differ in length"));
            }
            if col.rows.iter().any(|&r| r >= n) {
                return Err(Error::dim(format!("observed row outside dimension {n}")));
            }
        }
        let train_count: usize = train.iter().map(ObservedColumn::len).sum();
        if train_count == 0 {
            return Err(Error::contract("no observed training entries"));
        }
        let thin = train.iter().filter(|c| c.len() < p).count();
        if thin > 0 {
            log::warn!("{thin} samples have fewer than {p} observed entries; their coefficients are minimum-norm");
        }
        let test_count = test.iter().flatten().map(ObservedColumn::len).sum();
        Ok(Self { n, p, train, test, train_count, test_count })
    }

    /// Fully observed samples given as the columns of `x`.
    pub fn from_dense(x: &DMatrix<f64>, p: usize) -> Result<Self> {
        let cols = x.column_iter().map(|c| ObservedColumn::full(&c.into_owned())).collect();
        Self::new(x.nrows(), p, cols, None)
    }

    pub fn from_ratings(
        train: &RatingDataset,
        test: Option<&RatingDataset>,
        p: usize,
        axis: SampleAxis,
    ) -> Result<Self> {
        let (n, samples) = match axis {
            SampleAxis::Rows => (train.n_cols, train.n_rows),
            SampleAxis::Columns => (train.n_rows, train.n_cols),
        };
        let gather = |ds: &RatingDataset| -> Result<Vec<ObservedColumn>> {
            if (ds.n_rows, ds.n_cols) != (train.n_rows, train.n_cols) {
                return Err(Error::dim("train and test rating matrices differ in shape"));
            }
            let mut pairs: Vec<Vec<(usize, f64)>> = vec![Vec::new(); samples];
            for &(r, c, v) in &ds.entries {
                let (s, k) = match axis {
                    SampleAxis::Rows => (r, c),
                    SampleAxis::Columns => (c, r),
                };
                pairs[s].push((k, v));
            }
            pairs.into_iter().map(ObservedColumn::new).collect()
        };
        let tr = gather(train)?;
        let te = test.map(gather).transpose()?;
        Self::new(n, p, tr, te)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn p(&self) -> usize {
        self.p
    }

    pub fn train_columns(&self) -> &[ObservedColumn] {
        &self.train
    }

    /// Coefficients of every sample on its training entries, as a `p×N` matrix.
    pub fn coefficients(&self, u: &GrassmannPoint) -> Result<DMatrix<f64>> {
        let cols = map_batch(&super::full_batch(self.train.len()), |i| coeffs_or_zero(u, &self.train[i]))?;
        Ok(DMatrix::from_columns(&cols))
    }

    fn check_point(&self, u: &GrassmannPoint) -> Result<()> {
        if u.shape() != (self.n, self.p) {
            return Err(Error::dim(format!("point {:?} for a {}x{} problem", u.shape(), self.n, self.p)));
        }
        Ok(())
    }

    /// Exact Riemannian gradient; `a` is optimal on the observed rows, so only
    /// the explicit dependence on `U` contributes.
    pub fn lrmc_loss_grad(&self, u: &GrassmannPoint, batch: &[usize]) -> Result<(f64, TangentVector<GrassmannPoint>)> {
        self.check_point(u)?;
        check_batch(batch, self.train.len())?;
        let parts = map_batch(batch, |i| {
            let col = &self.train[i];
            let a = coeffs_or_zero(u, col)?;
            let r = residual(u, &a, col);
            Ok((a, r))
        })?;
        let mut loss = 0.0;
        let mut g = DMatrix::zeros(self.n, self.p);
        for (&i, (a, r)) in batch.iter().zip(&parts) {
            loss += 0.5 * r.norm_squared();
            for (&row, &ri) in self.train[i].rows.iter().zip(r.iter()) {
                for j in 0..self.p {
                    g[(row, j)] += ri * a[j];
                }
            }
        }
        let b = batch.len() as f64;
        g /= b;
        Ok((loss / b, TangentVector::new(u, u.project_ambient(&g))?))
    }

    /// Kronecker Fisher with right factor `mean (|Ω_i|/n) a_i a_iᵀ` and the projector on the left.
    ///
    /// A column observed on `Ω_i` has residual covariance `diag(1_Ω_i)`; it is
    /// replaced by its isotropic part `(|Ω_i|/n)·I`, which keeps the left factor
    /// the identity. Under full observation the weight is 1.
    pub fn lrmc_fisher(&self, u: &GrassmannPoint, batch: &[usize]) -> Result<KroneckerFisher> {
        self.check_point(u)?;
        check_batch(batch, self.train.len())?;
        let coeffs = map_batch(batch, |i| coeffs_or_zero(u, &self.train[i]))?;
        let mut a_factor = DMatrix::zeros(self.p, self.p);
        for (a, &i) in coeffs.iter().zip(batch) {
            let weight = self.train[i].len() as f64 / self.n as f64;
            a_factor.ger(weight, a, a, 1.0);
        }
        a_factor /= batch.len() as f64;
        KroneckerFisher::new(a_factor, Factor::Identity(self.n), ProjectorSide::Left)
    }

    /// Mean squared error on training entries and, when present, on held-out entries.
    pub fn mse(&self, u: &GrassmannPoint) -> Result<Metrics> {
        self.check_point(u)?;
        let all = super::full_batch(self.train.len());
        let sums = map_batch(&all, |i| {
            let a = coeffs_or_zero(u, &self.train[i])?;
            let tr = residual(u, &a, &self.train[i]).norm_squared();
            let te = match &self.test {
                Some(t) => residual(u, &a, &t[i]).norm_squared(),
                None => 0.0,
            };
            Ok((tr, te))
        })?;
        let train: f64 = sums.iter().map(|s| s.0).sum::<f64>() / self.train_count as f64;
        let test = match (&self.test, self.test_count) {
            (Some(_), c) if c > 0 => Some(sums.iter().map(|s| s.1).sum::<f64>() / c as f64),
            _ => None,
        };
        Ok(Metrics { train, test })
    }
}

impl ModelProblem for LrmcProblem {
    type Point = GrassmannPoint;

    fn num_samples(&self) -> usize {
        self.train.len()
    }

    fn loss(&self, point: &GrassmannPoint, batch: &[usize]) -> Result<f64> {
        self.check_point(point)?;
        check_batch(batch, self.train.len())?;
        let parts = map_batch(batch, |i| {
            let col = &self.train[i];
            let a = coeffs_or_zero(point, col)?;
            Ok(0.5 * residual(point, &a, col).norm_squared())
        })?;
        Ok(parts.iter().sum::<f64>() / batch.len() as f64)
    }

    fn loss_grad(&self, point: &GrassmannPoint, batch: &[usize]) -> Result<(f64, TangentVector<GrassmannPoint>)> {
        self.lrmc_loss_grad(point, batch)
    }

    fn fisher(&self, point: &GrassmannPoint, batch: &[usize]) -> Result<FisherOperator> {
        Ok(self.lrmc_fisher(point, batch)?.into())
    }

    fn metrics(&self, point: &GrassmannPoint) -> Result<Metrics> {
        self.mse(point)
    }

    fn random_point(&self, rng: &mut SeededRng) -> Result<GrassmannPoint> {
        GrassmannPoint::random(self.n, self.p, rng)
    }
}
