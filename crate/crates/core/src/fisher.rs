//! Curvature operators on a tangent space.
//!
//! Two representations are provided:
//!
//! - [`DenseFisher`]: an explicit `r×r` matrix acting on column-major
//!   `vec(ξ)`, `r = rows·cols`. Only meant for small problems and oracles.
//! - [`KroneckerFisher`]: a pair of factors with
//!   `F·vec(H) = vec(G·H·Aᵀ)`, i.e. `F = A ⊗ G`, followed by the tangent
//!   projection.
//!
//! Damped systems `(F + λI)d = −g` are solved either in the eigenbases of
//! the two factors or by conjugate gradients on the tangent space.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg::{kron, mat_of, min_sym_eigenvalue, solve_psd, sym_spectral_norm, vec_of};
use crate::manifold::{Manifold, TangentVector};

pub const DEFAULT_CG_TOL: f64 = 1e-8;
pub const DEFAULT_CG_MAXIT: usize = 250;

/// Explicit Fisher matrix in vectorized tangent coordinates.
#[derive(Clone, Debug)]
pub struct DenseFisher {
    mat: DMatrix<f64>,
    shape: (usize, usize),
}

impl DenseFisher {
    /// Validates symmetry (1e-10 relative) and positive semidefiniteness.
    pub fn new(mat: DMatrix<f64>, shape: (usize, usize)) -> Result<Self> {
        let r = shape.0 * shape.1;
        if mat.shape() != (r, r) {
            return Err(Error::dim(format!("dense Fisher must be {r}x{r}, got {:?}", mat.shape())));
        }
        let scale = mat.norm().max(f64::MIN_POSITIVE);
        let asym = (&mat - mat.transpose()).norm();
        if asym > 1e-10 * scale {
            return Err(Error::contract(format!("Fisher matrix not symmetric ({asym:e})")));
        }
        if min_sym_eigenvalue(&mat) < -1e-8 * scale {
            return Err(Error::contract("Fisher matrix is not positive semidefinite"));
        }
        Ok(Self { mat, shape })
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.mat
    }

    pub fn point_shape(&self) -> (usize, usize) {
        self.shape
    }
}

/// One Kronecker factor; `Identity` avoids storing large identity matrices.
#[derive(Clone, Debug)]
pub enum Factor {
    Identity(usize),
    Dense(DMatrix<f64>),
}

impl Factor {
    pub fn dim(&self) -> usize {
        match self {
            Factor::Identity(n) => *n,
            Factor::Dense(m) => m.nrows(),
        }
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        match self {
            Factor::Identity(n) => DMatrix::identity(*n, *n),
            Factor::Dense(m) => m.clone(),
        }
    }
}

/// Side of the tangent projection in a Kronecker-factored Fisher operator.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ProjectorSide {
    /// `(I − ΘΘᵀ)` acts on the row space (left, `G`) factor.
    Left,
    /// Projection acts on the right (`A`) factor.
    Right,
}

/// `F·vec(H) = P·vec(G·H·Aᵀ)`.
#[derive(Clone, Debug)]
pub struct KroneckerFisher {
    a_factor: DMatrix<f64>,
    g_factor: Factor,
    projector: ProjectorSide,
}

impl KroneckerFisher {
    pub fn new(a_factor: DMatrix<f64>, g_factor: Factor, projector: ProjectorSide) -> Result<Self> {
        check_sym_psd(&a_factor, "right factor")?;
        if let Factor::Dense(g) = &g_factor {
            check_sym_psd(g, "left factor")?;
        }
        Ok(Self { a_factor, g_factor, projector })
    }

    pub fn a_factor(&self) -> &DMatrix<f64> {
        &self.a_factor
    }

    pub fn g_factor(&self) -> &Factor {
        &self.g_factor
    }

    pub fn projector(&self) -> ProjectorSide {
        self.projector
    }

    /// `P (A ⊗ G) P` as an explicit matrix at `base`.
    pub fn to_dense<P: Manifold>(&self, base: &P) -> Result<DenseFisher> {
        let (rows, cols) = base.shape();
        let r = rows * cols;
        let mut out = DMatrix::zeros(r, r);
        for k in 0..r {
            let mut e = DVector::zeros(r);
            e[k] = 1.0;
            let col = self.apply_matrix(base, &mat_of(&e, rows, cols))?;
            out.set_column(k, &vec_of(&col));
        }
        // apply() projects its output but not its input; sandwich explicitly.
        let mut proj = DMatrix::zeros(r, r);
        for k in 0..r {
            let mut e = DVector::zeros(r);
            e[k] = 1.0;
            proj.set_column(k, &vec_of(&base.project_ambient(&mat_of(&e, rows, cols))));
        }
        DenseFisher::new(crate::linalg::symmetrize(&(&out * &proj)), (rows, cols))
    }

    fn apply_matrix<P: Manifold>(&self, base: &P, h: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        let (rows, cols) = base.shape();
        if self.a_factor.nrows() != cols || self.g_factor.dim() != rows {
            return Err(Error::dim(format!(
                "Kronecker factors {}x{} / {}x{} do not fit a {rows}x{cols} point",
                self.g_factor.dim(),
                self.g_factor.dim(),
                self.a_factor.nrows(),
                self.a_factor.ncols()
            )));
        }
        let right = h * self.a_factor.transpose();
        let both = match &self.g_factor {
            Factor::Identity(_) => right,
            Factor::Dense(g) => g * right,
        };
        Ok(base.project_ambient(&both))
    }
}

fn check_sym_psd(m: &DMatrix<f64>, what: &str) -> Result<()> {
    if m.nrows() != m.ncols() {
        return Err(Error::dim(format!("{what} must be square")));
    }
    let scale = m.norm().max(f64::MIN_POSITIVE);
    if (m - m.transpose()).norm() > 1e-10 * scale {
        return Err(Error::contract(format!("{what} is not symmetric")));
    }
    if m.nrows() > 0 && min_sym_eigenvalue(m) < -1e-10 * scale {
        return Err(Error::contract(format!("{what} is not positive semidefinite")));
    }
    Ok(())
}

#[derive(Clone, Debug)]
pub enum FisherOperator {
    Dense(DenseFisher),
    Kronecker(KroneckerFisher),
}

impl From<DenseFisher> for FisherOperator {
    fn from(f: DenseFisher) -> Self {
        FisherOperator::Dense(f)
    }
}

impl From<KroneckerFisher> for FisherOperator {
    fn from(f: KroneckerFisher) -> Self {
        FisherOperator::Kronecker(f)
    }
}

impl FisherOperator {
    fn apply_matrix<P: Manifold>(&self, base: &P, h: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        match self {
            FisherOperator::Kronecker(k) => k.apply_matrix(base, h),
            FisherOperator::Dense(d) => {
                let (rows, cols) = base.shape();
                if d.shape != (rows, cols) {
                    return Err(Error::dim("dense Fisher does not match point shape"));
                }
                let out = mat_of(&(&d.mat * vec_of(h)), rows, cols);
                Ok(base.project_ambient(&out))
            }
        }
    }
}

/// `F·d`, projected back onto the tangent space.
pub fn apply<P: Manifold>(f: &FisherOperator, d: &TangentVector<P>) -> Result<TangentVector<P>> {
    let out = f.apply_matrix(d.base(), d.mat())?;
    Ok(TangentVector::from_tangent(d.base(), out))
}

/// `F + λI` restricted to a tangent space.
#[derive(Clone, Debug)]
pub struct DampedOperator {
    pub inner: FisherOperator,
    pub lambda: f64,
}

impl DampedOperator {
    pub fn new(inner: FisherOperator, lambda: f64) -> Result<Self> {
        if !(lambda >= 0.0) || !lambda.is_finite() {
            return Err(Error::contract(format!("damping must be a finite nonnegative number, got {lambda}")));
        }
        Ok(Self { inner, lambda })
    }

    pub fn apply<P: Manifold>(&self, d: &TangentVector<P>) -> Result<TangentVector<P>> {
        let fd = apply(&self.inner, d)?;
        fd.add_scaled(d, self.lambda)
    }
}

/// Exact empirical Fisher `(1/|S|) Σ vec(g)vec(g)ᵀ` of per-sample Riemannian gradients.
pub fn exact_refim<P: Manifold>(samples: &[TangentVector<P>]) -> Result<DenseFisher> {
    let first = samples
        .first()
        .ok_or_else(|| Error::contract("empirical Fisher needs at least one sample"))?;
    let shape = first.base().shape();
    let r = shape.0 * shape.1;
    let mut acc = DMatrix::zeros(r, r);
    for g in samples {
        if !g.base().same_point(first.base()) {
            return Err(Error::contract("Fisher samples must share a base point"));
        }
        let v = vec_of(g.mat());
        acc.ger(1.0, &v, &v, 1.0);
    }
    acc /= samples.len() as f64;
    DenseFisher::new(crate::linalg::symmetrize(&acc), shape)
}

/// Kronecker-factored empirical Fisher from per-sample factors `∇ψ = G Aᵀ`.
///
/// `a_samples[i]` is the `cols×q` right factor and `g_samples[i]` the
/// `rows×q` left factor of sample `i`.
pub fn kron_refim(a_samples: &[DMatrix<f64>], g_samples: &[DMatrix<f64>]) -> Result<KroneckerFisher> {
    if a_samples.is_empty() {
        return Err(Error::contract("Kronecker Fisher needs at least one sample"));
    }
    if a_samples.len() != g_samples.len() {
        return Err(Error::dim("right and left factor lists differ in length"));
    }
    let qa = a_samples[0].nrows();
    let qg = g_samples[0].nrows();
    for (a, g) in a_samples.iter().zip(g_samples) {
        if a.nrows() != qa || g.nrows() != qg || a.ncols() != g.ncols() {
            return Err(Error::dim("inconsistent Kronecker factor shapes"));
        }
    }
    let n = a_samples.len() as f64;
    let a_factor = tree_sum(a_samples, |a| a * a.transpose()) / n;
    let g_factor = tree_sum(g_samples, |g| g * g.transpose()) / n;
    KroneckerFisher::new(
        crate::linalg::symmetrize(&a_factor),
        Factor::Dense(crate::linalg::symmetrize(&g_factor)),
        ProjectorSide::Left,
    )
}

/// Pairwise tree reduction with a split that depends only on the length,
/// so the floating-point result is independent of the thread count.
pub fn tree_sum<T, F>(items: &[T], f: F) -> DMatrix<f64>
where
    T: Sync,
    F: Fn(&T) -> DMatrix<f64> + Sync,
{
    fn go<T: Sync, F: Fn(&T) -> DMatrix<f64> + Sync>(items: &[T], f: &F) -> DMatrix<f64> {
        if items.len() <= 8 {
            let mut it = items.iter();
            let mut acc = f(it.next().expect("non-empty"));
            for x in it {
                acc += f(x);
            }
            return acc;
        }
        let mid = items.len() / 2;
        let (l, r) = rayon::join(|| go(&items[..mid], f), || go(&items[mid..], f));
        l + r
    }
    assert!(!items.is_empty(), "tree_sum of an empty slice");
    go(items, &f)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SolveMethod {
    /// Eigendecompositions of the factors (dense solve for a dense Fisher).
    Factored,
    /// Truncated conjugate gradients on the tangent space.
    Cg,
}

#[derive(Clone, Copy, Debug)]
pub struct SolverSettings {
    pub method: SolveMethod,
    pub cg_tol: f64,
    pub cg_maxit: usize,
}

impl Default for SolverSettings {
    fn default() -> Self {
        Self { method: SolveMethod::Factored, cg_tol: DEFAULT_CG_TOL, cg_maxit: DEFAULT_CG_MAXIT }
    }
}

#[derive(Clone, Debug)]
pub struct DampedSolution<P: Manifold> {
    pub direction: TangentVector<P>,
    /// False when CG hit its iteration cap; the best iterate is returned.
    pub converged: bool,
    pub iterations: usize,
    /// `‖(F + λI)d + g‖ / ‖g‖`.
    pub relative_residual: f64,
}

/// `d = −(F + λI)⁻¹ g` on the tangent space.
pub fn solve_damped<P: Manifold>(
    f: &FisherOperator,
    lambda: f64,
    g: &TangentVector<P>,
    settings: &SolverSettings,
) -> Result<DampedSolution<P>> {
    if !(lambda > 0.0) || !lambda.is_finite() {
        return Err(Error::contract(format!("damping must be positive, got {lambda}")));
    }
    let base = g.base();
    let gnorm = g.norm();
    if gnorm == 0.0 {
        return Ok(DampedSolution {
            direction: TangentVector::zero(base),
            converged: true,
            iterations: 0,
            relative_residual: 0.0,
        });
    }
    let damped = DampedOperator::new(f.clone(), lambda)?;
    match settings.method {
        SolveMethod::Factored => {
            let d = factored_solve(f, lambda, base, g.mat())?;
            let direction = TangentVector::from_tangent(base, base.project_ambient(&(-d)));
            let res = damped.apply(&direction)?.add_scaled(g, 1.0)?.norm() / gnorm;
            Ok(DampedSolution { direction, converged: true, iterations: 1, relative_residual: res })
        }
        SolveMethod::Cg => cg_solve(&damped, g, settings.cg_tol, settings.cg_maxit),
    }
}

fn factored_solve<P: Manifold>(
    f: &FisherOperator,
    lambda: f64,
    base: &P,
    rhs: &DMatrix<f64>,
) -> Result<DMatrix<f64>> {
    match f {
        FisherOperator::Kronecker(k) => {
            let (rows, cols) = base.shape();
            if k.a_factor.nrows() != cols || k.g_factor.dim() != rows {
                return Err(Error::dim("Kronecker factors do not fit the point"));
            }
            let ea = k.a_factor.clone().symmetric_eigen();
            let va = &ea.eigenvectors;
            match &k.g_factor {
                Factor::Identity(_) => {
                    let mut h = rhs * va;
                    for (j, mut col) in h.column_iter_mut().enumerate() {
                        col.unscale_mut(ea.eigenvalues[j].max(0.0) + lambda);
                    }
                    Ok(h * va.transpose())
                }
                Factor::Dense(gm) => {
                    let eg = gm.clone().symmetric_eigen();
                    let vg = &eg.eigenvectors;
                    let mut h = vg.transpose() * rhs * va;
                    for j in 0..h.ncols() {
                        for i in 0..h.nrows() {
                            let denom =
                                eg.eigenvalues[i].max(0.0) * ea.eigenvalues[j].max(0.0) + lambda;
                            h[(i, j)] /= denom;
                        }
                    }
                    Ok(vg * h * va.transpose())
                }
            }
        }
        FisherOperator::Dense(d) => {
            let (rows, cols) = base.shape();
            let r = rows * cols;
            if d.shape != (rows, cols) {
                return Err(Error::dim("dense Fisher does not match point shape"));
            }
            // P M P + λI is positive definite on the whole ambient space.
            let mut proj = DMatrix::zeros(r, r);
            for k in 0..r {
                let mut e = DVector::zeros(r);
                e[k] = 1.0;
                proj.set_column(k, &vec_of(&base.project_ambient(&mat_of(&e, rows, cols))));
            }
            let sys = &proj * &d.mat * &proj + DMatrix::identity(r, r) * lambda;
            let b = DMatrix::from_column_slice(r, 1, rhs.as_slice());
            let (x, _) = solve_psd(&crate::linalg::symmetrize(&sys), &b);
            Ok(DMatrix::from_column_slice(rows, cols, x.as_slice()))
        }
    }
}

fn cg_solve<P: Manifold>(
    op: &DampedOperator,
    g: &TangentVector<P>,
    tol: f64,
    maxit: usize,
) -> Result<DampedSolution<P>> {
    let gnorm = g.norm();
    let mut x = TangentVector::zero(g.base());
    let mut r = g.scaled(-1.0);
    let mut p = r.clone();
    let mut rr = r.norm().powi(2);
    let mut best = (x.clone(), rr.sqrt());
    let mut iterations = 0;
    while iterations < maxit && rr.sqrt() > tol * gnorm {
        let ap = op.apply(&p)?;
        let pap = p.mat().dot(ap.mat());
        if !(pap > 0.0) {
            break;
        }
        let alpha = rr / pap;
        x = x.add_scaled(&p, alpha)?;
        r = r.add_scaled(&ap, -alpha)?;
        let rr_new = r.norm().powi(2);
        iterations += 1;
        if rr_new.sqrt() < best.1 {
            best = (x.clone(), rr_new.sqrt());
        }
        let beta = rr_new / rr;
        p = r.add_scaled(&p, beta)?;
        rr = rr_new;
    }
    let (x, _) = best;
    // Recompute the true residual; the recursive one drifts.
    let residual = op.apply(&x)?.add_scaled(g, 1.0)?.norm() / gnorm;
    let converged = residual <= tol;
    if !converged {
        log::warn!("CG stopped after {iterations} iterations with relative residual {residual:e}");
    }
    Ok(DampedSolution { direction: x, converged, iterations, relative_residual: residual })
}

/// `‖A − B‖₂ / ‖A‖₂` for symmetric matrices.
pub fn relative_spectral_distance(reference: &DenseFisher, other: &DenseFisher) -> f64 {
    let diff = reference.matrix() - other.matrix();
    sym_spectral_norm(&diff) / sym_spectral_norm(reference.matrix()).max(f64::MIN_POSITIVE)
}

/// Dense `A ⊗ G` with no projection; a convenience for oracles.
pub fn kron_dense(k: &KroneckerFisher) -> DMatrix<f64> {
    kron(&k.a_factor, &k.g_factor.to_dense())
}
