//! Grassmann and product-of-spheres geometry.
//!
//! A point of `Gr(n, p)` is stored as one `n×p` representative with
//! orthonormal columns. Two representatives of the same subspace differ by a
//! right `p×p` orthogonal factor, so points are only ever compared through
//! their projectors (`subspace_dist`). Tangent vectors live in the ambient
//! matrix space and satisfy `Θᵀξ = 0`; the Riemannian metric is the embedded
//! Euclidean one, `⟨ξ, ζ⟩ = tr(ξᵀζ)`.
//!
//! [`UnitRowPoint`] is the product `Gr(1,n) × … × Gr(1,n)` with every factor
//! represented by a unit vector, stored as the rows of an `m×n` matrix.
//!
//! Every retraction re-orthonormalizes its output with a sign-fixed thin QR.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use nalgebra::DMatrix;
use rand::Rng;

use crate::error::{Error, Result};
use crate::linalg::{gaussian_matrix, orthonormalize};

/// Tangency tolerance, scaled by `max(1, ‖ξ‖)`.
pub const TANGENT_TOL: f64 = 1e-10;
/// Orthonormality violations up to this size are repaired, larger ones rejected.
pub const RENORMALIZE_LIMIT: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Default)]
pub enum RetractionKind {
    /// Polar factor of `Θ + ξ`; second order.
    #[default]
    Polar,
    /// Q factor of `Θ + ξ`; first order only.
    Qr,
    /// Geodesic step.
    Exponential,
}

impl fmt::Display for RetractionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            RetractionKind::Polar => "polar",
            RetractionKind::Qr => "qr",
            RetractionKind::Exponential => "exp",
        };
        f.write_str(s)
    }
}

impl FromStr for RetractionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "polar" => Ok(RetractionKind::Polar),
            "qr" => Ok(RetractionKind::Qr),
            "exp" | "exponential" => Ok(RetractionKind::Exponential),
            other => Err(Error::Config(format!("unknown retraction '{other}'"))),
        }
    }
}

/// Geometry shared by the manifolds in this crate.
///
/// Implementors are immutable values; cloning is cheap.
pub trait Manifold: Clone + fmt::Debug + Send + Sync {
    /// The stored representative.
    fn matrix(&self) -> &DMatrix<f64>;

    fn shape(&self) -> (usize, usize) {
        self.matrix().shape()
    }

    /// Orthogonal projection of an ambient matrix onto the tangent space.
    fn project_ambient(&self, ambient: &DMatrix<f64>) -> DMatrix<f64>;

    /// Size of the normal component of `m`.
    fn tangency_residual(&self, m: &DMatrix<f64>) -> f64;

    /// Moves along the tangent matrix `step` with the given retraction.
    fn move_along(&self, step: &DMatrix<f64>, kind: RetractionKind) -> Result<Self>;

    /// Projector distance to another point of the same manifold.
    fn projector_distance(&self, other: &Self) -> f64;

    /// Whether `other` is the same stored point.
    fn same_point(&self, other: &Self) -> bool;
}

// ---------------------------------------------------------------------------
// Grassmann

/// A point of `Gr(n, p)`.
#[derive(Clone)]
pub struct GrassmannPoint {
    mat: Arc<DMatrix<f64>>,
}

impl fmt::Debug for GrassmannPoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let (n, p) = self.mat.shape();
        write!(f, "GrassmannPoint({n}x{p})")
    }
}

impl GrassmannPoint {
    /// Wraps an orthonormal representative.
    ///
    /// Representatives within [`RENORMALIZE_LIMIT`] of orthonormal are
    /// repaired; anything further off is rejected.
    pub fn new(mat: DMatrix<f64>) -> Result<Self> {
        let (n, p) = mat.shape();
        if p == 0 || n < p {
            return Err(Error::dim(format!("Gr(n,p) needs n >= p >= 1, got {n}x{p}")));
        }
        let violation = orthonormality_violation(&mat);
        if !violation.is_finite() || violation > RENORMALIZE_LIMIT {
            return Err(Error::contract(format!(
                "representative is not orthonormal (||MᵀM - I|| = {violation:e})"
            )));
        }
        let mat = if violation > 1e-13 { orthonormalize(&mat)? } else { mat };
        Ok(Self { mat: Arc::new(mat) })
    }

    /// The subspace spanned by the columns of a full-rank matrix.
    pub fn from_span(mat: &DMatrix<f64>) -> Result<Self> {
        Ok(Self { mat: Arc::new(orthonormalize(mat)?) })
    }

    /// QR of a standard Gaussian `n×p` matrix.
    pub fn random<R: Rng + ?Sized>(n: usize, p: usize, rng: &mut R) -> Result<Self> {
        if p == 0 || n < p {
            return Err(Error::dim(format!("Gr(n,p) needs n >= p >= 1, got {n}x{p}")));
        }
        loop {
            let g = gaussian_matrix(n, p, rng);
            if let Ok(q) = orthonormalize(&g) {
                return Ok(Self { mat: Arc::new(q) });
            }
        }
    }

    pub fn n(&self) -> usize {
        self.mat.nrows()
    }

    pub fn p(&self) -> usize {
        self.mat.ncols()
    }

    /// Dense projector `ΘΘᵀ`.
    pub fn projector(&self) -> DMatrix<f64> {
        &*self.mat * self.mat.transpose()
    }

    /// Same subspace, representative multiplied on the right by `o`.
    pub fn rotated(&self, o: &DMatrix<f64>) -> Result<Self> {
        Self::new(&*self.mat * o)
    }

    fn polar(y: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        let svd = y.clone().svd(true, true);
        let (u, vt) = match (svd.u, svd.v_t) {
            (Some(u), Some(vt)) => (u, vt),
            _ => return Err(Error::numerical("SVD failed in polar retraction")),
        };
        let smin = svd.singular_values.iter().fold(f64::INFINITY, |a, &v| a.min(v));
        if !(smin > 0.0) {
            return Err(Error::numerical("rank-deficient matrix in polar retraction"));
        }
        Ok(u * vt)
    }

    fn geodesic(&self, xi: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        let p = self.p();
        let svd = xi.clone().svd(true, true);
        let (u, vt) = match (svd.u, svd.v_t) {
            (Some(u), Some(vt)) => (u, vt),
            _ => return Err(Error::numerical("SVD failed in exponential map")),
        };
        let v = vt.transpose();
        let mut cos = DMatrix::zeros(p, p);
        let mut sin = DMatrix::zeros(p, p);
        for (i, &s) in svd.singular_values.iter().enumerate() {
            cos[(i, i)] = s.cos();
            sin[(i, i)] = s.sin();
        }
        Ok((&*self.mat * &v * cos + u * sin) * vt)
    }
}

impl Manifold for GrassmannPoint {
    fn matrix(&self) -> &DMatrix<f64> {
        &self.mat
    }

    fn project_ambient(&self, ambient: &DMatrix<f64>) -> DMatrix<f64> {
        ambient - &*self.mat * (self.mat.transpose() * ambient)
    }

    fn tangency_residual(&self, m: &DMatrix<f64>) -> f64 {
        (self.mat.transpose() * m).norm()
    }

    fn move_along(&self, step: &DMatrix<f64>, kind: RetractionKind) -> Result<Self> {
        let raw = match kind {
            RetractionKind::Polar => Self::polar(&(&*self.mat + step))?,
            RetractionKind::Qr => orthonormalize(&(&*self.mat + step))?,
            RetractionKind::Exponential => self.geodesic(step)?,
        };
        Ok(Self { mat: Arc::new(orthonormalize(&raw)?) })
    }

    fn projector_distance(&self, other: &Self) -> f64 {
        // For equal p, ‖PPᵀ − QQᵀ‖²_F = 2‖(I − PPᵀ)Q‖²_F; the residual form
        // avoids cancellation near zero distance.
        std::f64::consts::SQRT_2 * self.project_ambient(&other.mat).norm()
    }

    fn same_point(&self, other: &Self) -> bool {
        Arc::ptr_eq(&self.mat, &other.mat) || *self.mat == *other.mat
    }
}

fn orthonormality_violation(mat: &DMatrix<f64>) -> f64 {
    let p = mat.ncols();
    (mat.transpose() * mat - DMatrix::identity(p, p)).norm()
}

// ---------------------------------------------------------------------------
// Product of Gr(1, n) with unit-vector representatives

/// `m` unit vectors in `R^n`, one per row.
#[derive(Clone)]
pub struct UnitRowPoint {
    mat: Arc<DMatrix<f64>>,
}

impl fmt::Debug for UnitRowPoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let (m, n) = self.mat.shape();
        write!(f, "UnitRowPoint({m}x{n})")
    }
}

impl UnitRowPoint {
    /// Rows within [`RENORMALIZE_LIMIT`] of unit norm are rescaled; others are rejected.
    pub fn new(mut mat: DMatrix<f64>) -> Result<Self> {
        if mat.nrows() == 0 || mat.ncols() == 0 {
            return Err(Error::dim("unit-row point needs at least one row and column"));
        }
        for j in 0..mat.nrows() {
            let norm = mat.row(j).norm();
            if !norm.is_finite() || (norm - 1.0).abs() > RENORMALIZE_LIMIT {
                return Err(Error::contract(format!("row {j} has norm {norm}, expected 1")));
            }
            if (norm - 1.0).abs() > 1e-14 {
                mat.row_mut(j).unscale_mut(norm);
            }
        }
        Ok(Self { mat: Arc::new(mat) })
    }

    /// Normalizes every nonzero row of `mat`.
    pub fn from_directions(mat: &DMatrix<f64>) -> Result<Self> {
        let mut out = mat.clone();
        for j in 0..out.nrows() {
            let norm = out.row(j).norm();
            if !(norm > 0.0) || !norm.is_finite() {
                return Err(Error::numerical(format!("row {j} cannot be normalized")));
            }
            out.row_mut(j).unscale_mut(norm);
        }
        Ok(Self { mat: Arc::new(out) })
    }

    /// I.i.d. uniform rows on the unit sphere (normalized Gaussians).
    pub fn random<R: Rng + ?Sized>(m: usize, n: usize, rng: &mut R) -> Result<Self> {
        if m == 0 || n == 0 {
            return Err(Error::dim("unit-row point needs m, n >= 1"));
        }
        loop {
            let g = gaussian_matrix(m, n, rng);
            if let Ok(p) = Self::from_directions(&g) {
                return Ok(p);
            }
        }
    }

    pub fn rows(&self) -> usize {
        self.mat.nrows()
    }

    pub fn dim(&self) -> usize {
        self.mat.ncols()
    }
}

impl Manifold for UnitRowPoint {
    fn matrix(&self) -> &DMatrix<f64> {
        &self.mat
    }

    fn project_ambient(&self, ambient: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = ambient.clone();
        for j in 0..out.nrows() {
            let row = self.mat.row(j);
            let c = row.dot(&ambient.row(j));
            let corrected = ambient.row(j) - row * c;
            out.row_mut(j).copy_from(&corrected);
        }
        out
    }

    fn tangency_residual(&self, m: &DMatrix<f64>) -> f64 {
        (0..m.nrows())
            .map(|j| self.mat.row(j).dot(&m.row(j)).powi(2))
            .sum::<f64>()
            .sqrt()
    }

    fn move_along(&self, step: &DMatrix<f64>, kind: RetractionKind) -> Result<Self> {
        match kind {
            // On a sphere the polar factor and the Q factor of θ + ξ are both
            // the normalized vector.
            RetractionKind::Polar | RetractionKind::Qr => {
                Self::from_directions(&(&*self.mat + step))
            }
            RetractionKind::Exponential => {
                let mut out = (*self.mat).clone();
                for j in 0..out.nrows() {
                    let s = step.row(j).norm();
                    if s > 0.0 {
                        let dir = step.row(j) / s;
                        let row = self.mat.row(j) * s.cos() + dir * s.sin();
                        out.row_mut(j).copy_from(&row);
                    }
                }
                Self::from_directions(&out)
            }
        }
    }

    fn projector_distance(&self, other: &Self) -> f64 {
        (0..self.rows())
            .map(|j| {
                let row = self.mat.row(j);
                let c = row.dot(&other.mat.row(j));
                2.0 * (other.mat.row(j) - row * c).norm_squared()
            })
            .sum::<f64>()
            .sqrt()
    }

    fn same_point(&self, other: &Self) -> bool {
        Arc::ptr_eq(&self.mat, &other.mat) || *self.mat == *other.mat
    }
}

// ---------------------------------------------------------------------------
// Tangent vectors

/// An element of the tangent space at `base`, stored in ambient coordinates.
#[derive(Clone, Debug)]
pub struct TangentVector<P: Manifold> {
    base: P,
    mat: DMatrix<f64>,
}

impl<P: Manifold> TangentVector<P> {
    /// Validates tangency of `mat` at `base`.
    pub fn new(base: &P, mat: DMatrix<f64>) -> Result<Self> {
        if mat.shape() != base.shape() {
            return Err(Error::dim(format!(
                "tangent matrix {:?} does not match point {:?}",
                mat.shape(),
                base.shape()
            )));
        }
        let res = base.tangency_residual(&mat);
        if !(res <= TANGENT_TOL * mat.norm().max(1.0)) {
            return Err(Error::contract(format!("matrix is not tangent (normal part {res:e})")));
        }
        Ok(Self { base: base.clone(), mat })
    }

    /// Trusted constructor for matrices that were just projected.
    pub(crate) fn from_tangent(base: &P, mat: DMatrix<f64>) -> Self {
        Self { base: base.clone(), mat }
    }

    pub fn zero(base: &P) -> Self {
        let (r, c) = base.shape();
        Self { base: base.clone(), mat: DMatrix::zeros(r, c) }
    }

    pub fn base(&self) -> &P {
        &self.base
    }

    pub fn mat(&self) -> &DMatrix<f64> {
        &self.mat
    }

    pub fn into_mat(self) -> DMatrix<f64> {
        self.mat
    }

    pub fn scaled(&self, c: f64) -> Self {
        Self { base: self.base.clone(), mat: &self.mat * c }
    }

    /// `self + c·other`.
    pub fn add_scaled(&self, other: &Self, c: f64) -> Result<Self> {
        check_same_base(&self.base, &other.base)?;
        Ok(Self { base: self.base.clone(), mat: &self.mat + &other.mat * c })
    }

    pub fn norm(&self) -> f64 {
        self.mat.norm()
    }
}

fn check_same_base<P: Manifold>(a: &P, b: &P) -> Result<()> {
    if a.same_point(b) {
        Ok(())
    } else {
        Err(Error::contract("tangent vectors live at different base points"))
    }
}

/// `(I − ΘΘᵀ)·ambient` (row-wise on unit-row points).
pub fn project<P: Manifold>(base: &P, ambient: &DMatrix<f64>) -> Result<TangentVector<P>> {
    if ambient.shape() != base.shape() {
        return Err(Error::dim(format!(
            "ambient matrix {:?} does not match point {:?}",
            ambient.shape(),
            base.shape()
        )));
    }
    Ok(TangentVector::from_tangent(base, base.project_ambient(ambient)))
}

/// `R_base(t·ξ)`.
pub fn retract<P: Manifold>(
    base: &P,
    xi: &TangentVector<P>,
    t: f64,
    kind: RetractionKind,
) -> Result<P> {
    check_same_base(base, &xi.base)?;
    if !t.is_finite() {
        return Err(Error::contract("retraction step length must be finite"));
    }
    if t == 0.0 {
        return Ok(base.clone());
    }
    base.move_along(&(&xi.mat * t), kind)
}

/// Geodesic step `Exp_base(t·ξ)`.
pub fn exp_map<P: Manifold>(base: &P, xi: &TangentVector<P>, t: f64) -> Result<P> {
    retract(base, xi, t, RetractionKind::Exponential)
}

/// `tr(ξᵀζ)`.
pub fn inner<P: Manifold>(xi: &TangentVector<P>, zeta: &TangentVector<P>) -> Result<f64> {
    check_same_base(&xi.base, &zeta.base)?;
    Ok(xi.mat.dot(&zeta.mat))
}

pub fn norm<P: Manifold>(xi: &TangentVector<P>) -> f64 {
    xi.mat.norm()
}

/// `‖PPᵀ − QQᵀ‖_F`.
pub fn subspace_dist<P: Manifold>(a: &P, b: &P) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::dim(format!("points of shape {:?} and {:?}", a.shape(), b.shape())));
    }
    Ok(a.projector_distance(b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{kron, seeded_rng, vec_of};
    use proptest::prelude::*;
    use std::f64::consts::{FRAC_PI_2, SQRT_2};

    fn random_tangent<R: rand::Rng>(base: &GrassmannPoint, rng: &mut R) -> TangentVector<GrassmannPoint> {
        let (n, p) = base.shape();
        project(base, &gaussian_matrix(n, p, rng)).unwrap()
    }

    #[test]
    fn project_point_onto_itself_is_zero() {
        let mut rng = seeded_rng(3);
        let theta = GrassmannPoint::random(6, 2, &mut rng).unwrap();
        let z = project(&theta, theta.matrix()).unwrap();
        assert!(z.norm() < 1e-14);
    }

    #[test]
    fn project_fixes_tangent_vectors() {
        let mut rng = seeded_rng(4);
        let theta = GrassmannPoint::random(6, 2, &mut rng).unwrap();
        let xi = random_tangent(&theta, &mut rng);
        let again = project(&theta, xi.mat()).unwrap();
        assert!((again.mat() - xi.mat()).norm() < 1e-14);
    }

    #[test]
    fn project_matches_dense_projector() {
        let mut rng = seeded_rng(5);
        let theta = GrassmannPoint::random(6, 2, &mut rng).unwrap();
        let g = gaussian_matrix(6, 2, &mut rng);
        // vec((I − ΘΘᵀ)G) = (I_p ⊗ (I − ΘΘᵀ)) vec(G)
        let b1 = DMatrix::identity(6, 6) - theta.projector();
        let dense = kron(&DMatrix::identity(2, 2), &b1) * vec_of(&g);
        let via_op = project(&theta, &g).unwrap();
        assert!((vec_of(via_op.mat()) - dense).norm() < 1e-13);
        assert!(theta.tangency_residual(via_op.mat()) < 1e-13);
    }

    #[test]
    fn project_rejects_wrong_shape() {
        let mut rng = seeded_rng(6);
        let theta = GrassmannPoint::random(5, 2, &mut rng).unwrap();
        assert!(matches!(project(&theta, &DMatrix::zeros(5, 3)), Err(Error::Dimension(_))));
    }

    #[test]
    fn tangent_vector_constructor_rejects_normal_directions() {
        let mut rng = seeded_rng(7);
        let theta = GrassmannPoint::random(5, 2, &mut rng).unwrap();
        let err = TangentVector::new(&theta, theta.matrix().clone()).unwrap_err();
        assert!(matches!(err, Error::Contract(_)));
    }

    #[test]
    fn constructor_repairs_small_drift_and_rejects_large() {
        let mut rng = seeded_rng(8);
        let theta = GrassmannPoint::random(5, 2, &mut rng).unwrap();
        let drifted = theta.matrix() * (1.0 + 1e-9);
        let fixed = GrassmannPoint::new(drifted).unwrap();
        assert!(orthonormality_violation(fixed.matrix()) < 1e-12);
        assert!(fixed.projector_distance(&theta) < 1e-10);
        assert!(GrassmannPoint::new(theta.matrix() * 1.01).is_err());
    }

    #[test]
    fn retraction_at_zero_is_identity() {
        let mut rng = seeded_rng(9);
        let theta = GrassmannPoint::random(7, 3, &mut rng).unwrap();
        let xi = random_tangent(&theta, &mut rng);
        for kind in [RetractionKind::Polar, RetractionKind::Qr, RetractionKind::Exponential] {
            let same = retract(&theta, &xi, 0.0, kind).unwrap();
            assert!((same.matrix() - theta.matrix()).norm() < 1e-15);
            let zero = TangentVector::zero(&theta);
            let moved = retract(&theta, &zero, 1.0, kind).unwrap();
            assert!((moved.matrix() - theta.matrix()).norm() < 1e-12);
        }
    }

    #[test]
    fn first_order_axiom_by_finite_differences() {
        let mut rng = seeded_rng(10);
        let theta = GrassmannPoint::random(8, 2, &mut rng).unwrap();
        let xi = random_tangent(&theta, &mut rng);
        for kind in [RetractionKind::Polar, RetractionKind::Qr, RetractionKind::Exponential] {
            let ratios: Vec<f64> = [1e-2, 1e-3, 1e-4]
                .iter()
                .map(|&t| {
                    let r = retract(&theta, &xi, t, kind).unwrap();
                    (r.matrix() - theta.matrix() - xi.mat() * t).norm() / t
                })
                .collect();
            // ratio is O(t): shrinks by ~10 per decade
            assert!(ratios[1] < 0.2 * ratios[0], "{kind}: {ratios:?}");
            assert!(ratios[2] < 0.2 * ratios[1], "{kind}: {ratios:?}");
        }
    }

    #[test]
    fn polar_is_second_order() {
        let mut rng = seeded_rng(11);
        let theta = GrassmannPoint::random(8, 3, &mut rng).unwrap();
        let xi = random_tangent(&theta, &mut rng);
        let res = |t: f64| {
            let r = retract(&theta, &xi, t, RetractionKind::Polar).unwrap();
            theta.project_ambient(&(r.matrix() - theta.matrix() - xi.mat() * t)).norm()
        };
        let ratio = res(1e-1) / res(1e-2);
        assert!(ratio > 500.0, "third-order decay expected, ratio {ratio}");
    }

    #[test]
    fn geodesic_on_circle_quarter_turn() {
        let base = GrassmannPoint::new(DMatrix::from_column_slice(2, 1, &[1.0, 0.0])).unwrap();
        let xi = TangentVector::new(&base, DMatrix::from_column_slice(2, 1, &[0.0, 1.0])).unwrap();
        let end = exp_map(&base, &xi, FRAC_PI_2).unwrap();
        let e2 = GrassmannPoint::new(DMatrix::from_column_slice(2, 1, &[0.0, 1.0])).unwrap();
        assert!(subspace_dist(&end, &e2).unwrap() < 1e-12);
    }

    #[test]
    fn exp_and_polar_agree_to_third_order() {
        let mut rng = seeded_rng(12);
        let theta = GrassmannPoint::random(9, 3, &mut rng).unwrap();
        let xi = random_tangent(&theta, &mut rng);
        let gap = |t: f64| {
            let a = exp_map(&theta, &xi, t).unwrap();
            let b = retract(&theta, &xi, t, RetractionKind::Polar).unwrap();
            subspace_dist(&a, &b).unwrap()
        };
        let ratio = gap(1e-1) / gap(1e-2);
        assert!(ratio > 500.0, "ratio {ratio}");
    }

    #[test]
    fn exp_displacement_bounded_by_step_length() {
        let mut rng = seeded_rng(13);
        for _ in 0..20 {
            let theta = GrassmannPoint::random(6, 2, &mut rng).unwrap();
            let xi = random_tangent(&theta, &mut rng).scaled(3.0);
            let moved = exp_map(&theta, &xi, 1.0).unwrap();
            assert!((moved.matrix() - theta.matrix()).norm() <= xi.norm() + 1e-10);
        }
    }

    #[test]
    fn distance_on_circle_between_axes() {
        let e1 = GrassmannPoint::new(DMatrix::from_column_slice(2, 1, &[1.0, 0.0])).unwrap();
        let e2 = GrassmannPoint::new(DMatrix::from_column_slice(2, 1, &[0.0, 1.0])).unwrap();
        assert!((subspace_dist(&e1, &e2).unwrap() - SQRT_2).abs() < 1e-15);
    }

    #[test]
    fn distance_matches_dense_projectors() {
        let mut rng = seeded_rng(14);
        let a = GrassmannPoint::random(7, 3, &mut rng).unwrap();
        let b = GrassmannPoint::random(7, 3, &mut rng).unwrap();
        let dense = (a.projector() - b.projector()).norm();
        assert!((subspace_dist(&a, &b).unwrap() - dense).abs() < 1e-12);
    }

    #[test]
    fn different_seeds_give_different_subspaces() {
        let a = GrassmannPoint::random(6, 2, &mut seeded_rng(1)).unwrap();
        let b = GrassmannPoint::random(6, 2, &mut seeded_rng(2)).unwrap();
        assert!(subspace_dist(&a, &b).unwrap() > 0.0);
    }

    #[test]
    fn uniform_rows_have_zero_mean_projection() {
        let mut rng = seeded_rng(15);
        let x = UnitRowPoint::random(1, 5, &mut rng).unwrap();
        let draws = 100_000;
        let v = UnitRowPoint::random(draws, 5, &mut rng).unwrap();
        let mean = (v.matrix() * x.matrix().row(0).transpose()).sum() / draws as f64;
        assert!(mean.abs() < 3.0 / (draws as f64).sqrt(), "mean {mean}");
    }

    #[test]
    fn inner_rejects_mismatched_bases() {
        let mut rng = seeded_rng(16);
        let a = GrassmannPoint::random(5, 2, &mut rng).unwrap();
        let b = GrassmannPoint::random(5, 2, &mut rng).unwrap();
        let xa = random_tangent(&a, &mut rng);
        let xb = random_tangent(&b, &mut rng);
        assert!(matches!(inner(&xa, &xb), Err(Error::Contract(_))));
        assert!((inner(&xa, &xa).unwrap() - xa.norm().powi(2)).abs() < 1e-12);
    }

    #[test]
    fn unit_rows_geometry() {
        let mut rng = seeded_rng(17);
        let theta = UnitRowPoint::random(4, 3, &mut rng).unwrap();
        let xi = project(&theta, &gaussian_matrix(4, 3, &mut rng)).unwrap();
        assert!(theta.tangency_residual(xi.mat()) < 1e-14);
        for kind in [RetractionKind::Polar, RetractionKind::Exponential] {
            let moved = retract(&theta, &xi, 0.3, kind).unwrap();
            for j in 0..4 {
                assert!((moved.matrix().row(j).norm() - 1.0).abs() < 1e-12);
            }
        }
        let moved = exp_map(&theta, &xi, 1.0).unwrap();
        assert!((moved.matrix() - theta.matrix()).norm() <= xi.norm() + 1e-12);
        assert!(UnitRowPoint::new(DMatrix::from_row_slice(1, 2, &[2.0, 0.0])).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn projection_is_idempotent_and_self_adjoint(seed in any::<u64>(), n in 2usize..9, p in 1usize..4) {
            prop_assume!(p <= n);
            let mut rng = seeded_rng(seed);
            let theta = GrassmannPoint::random(n, p, &mut rng).unwrap();
            let g = gaussian_matrix(n, p, &mut rng);
            let pg = project(&theta, &g).unwrap();
            let ppg = project(&theta, pg.mat()).unwrap();
            prop_assert!((ppg.mat() - pg.mat()).norm() < 1e-12);
            let h = random_tangent(&theta, &mut rng);
            let lhs = pg.mat().dot(h.mat());
            let rhs = g.dot(project(&theta, h.mat()).unwrap().mat());
            prop_assert!((lhs - rhs).abs() < 1e-12);
        }

        #[test]
        fn retractions_stay_on_manifold(seed in any::<u64>(), t in -3.0f64..3.0) {
            let mut rng = seeded_rng(seed);
            let theta = GrassmannPoint::random(7, 3, &mut rng).unwrap();
            let xi = random_tangent(&theta, &mut rng);
            for kind in [RetractionKind::Polar, RetractionKind::Qr, RetractionKind::Exponential] {
                let r = retract(&theta, &xi, t, kind).unwrap();
                prop_assert!(orthonormality_violation(r.matrix()) < 1e-12);
            }
        }

        #[test]
        fn distance_ignores_representative(seed in any::<u64>()) {
            let mut rng = seeded_rng(seed);
            let theta = GrassmannPoint::random(6, 3, &mut rng).unwrap();
            let o = orthonormalize(&gaussian_matrix(3, 3, &mut rng)).unwrap();
            let rotated = theta.rotated(&o).unwrap();
            prop_assert!(subspace_dist(&theta, &rotated).unwrap() < 1e-12);
        }
    }
}
