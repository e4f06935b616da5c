//! Small dense linear-algebra helpers shared across modules.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

/// Deterministic RNG used everywhere a seed is accepted.
pub type SeededRng = ChaCha8Rng;

pub fn seeded_rng(seed: u64) -> SeededRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Derives an independent stream for shard `index` of a run seeded with `seed`.
pub fn shard_rng(seed: u64, index: u64) -> SeededRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index.wrapping_add(1));
    rng
}

pub fn gaussian_matrix<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| rng.sample(StandardNormal))
}

pub fn gaussian_vector<R: Rng + ?Sized>(len: usize, rng: &mut R) -> DVector<f64> {
    DVector::from_fn(len, |_, _| rng.sample(StandardNormal))
}

/// Thin QR factor with the sign convention diag(R) > 0.
///
/// Fails when the input is numerically rank deficient.
pub fn orthonormalize(mat: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let (n, p) = mat.shape();
    if p == 0 || n < p {
        return Err(Error::dim(format!("cannot orthonormalize a {n}x{p} matrix")));
    }
    if mat.iter().any(|v| !v.is_finite()) {
        return Err(Error::numerical("non-finite entries in matrix to orthonormalize"));
    }
    let qr = mat.clone().qr();
    let r = qr.r();
    let mut q = qr.q();
    let scale = r.diagonal().iter().fold(0.0_f64, |acc, v| acc.max(v.abs()));
    for j in 0..p {
        let d = r[(j, j)];
        if d.abs() <= 1e-13 * scale.max(f64::MIN_POSITIVE) {
            return Err(Error::numerical("rank-deficient matrix in QR"));
        }
        if d < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    Ok(q)
}

/// Column-major vectorization.
pub fn vec_of(mat: &DMatrix<f64>) -> DVector<f64> {
    DVector::from_column_slice(mat.as_slice())
}

pub fn mat_of(v: &DVector<f64>, rows: usize, cols: usize) -> DMatrix<f64> {
    DMatrix::from_column_slice(rows, cols, v.as_slice())
}

/// Dense Kronecker product `a ⊗ b`.
pub fn kron(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    let (ar, ac) = a.shape();
    let (br, bc) = b.shape();
    let mut out = DMatrix::zeros(ar * br, ac * bc);
    for i in 0..ar {
        for j in 0..ac {
            let aij = a[(i, j)];
            if aij == 0.0 {
                continue;
            }
            out.view_mut((i * br, j * bc), (br, bc)).copy_from(&(b * aij));
        }
    }
    out
}

pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// Spectral norm of a symmetric matrix.
pub fn sym_spectral_norm(m: &DMatrix<f64>) -> f64 {
    if m.is_empty() {
        return 0.0;
    }
    symmetrize(m)
        .symmetric_eigenvalues()
        .iter()
        .fold(0.0_f64, |acc, v| acc.max(v.abs()))
}

pub fn min_sym_eigenvalue(m: &DMatrix<f64>) -> f64 {
    symmetrize(m)
        .symmetric_eigenvalues()
        .iter()
        .fold(f64::INFINITY, |acc, &v| acc.min(v))
}

/// Solves `m x = b` for symmetric positive semidefinite `m`.
///
/// Uses Cholesky when it succeeds; otherwise falls back to the minimum-norm
/// pseudo-inverse solution. The flag reports whether the fallback was taken.
pub fn solve_psd(m: &DMatrix<f64>, b: &DMatrix<f64>) -> (DMatrix<f64>, bool) {
    if let Some(chol) = m.clone().cholesky() {
        let x = chol.solve(b);
        if x.iter().all(|v| v.is_finite()) {
            let scale = sym_spectral_norm(m);
            let diag_min = chol.l_dirty().diagonal().iter().fold(f64::INFINITY, |a, v| a.min(v.abs()));
            if diag_min * diag_min > 1e-12 * scale {
                return (x, false);
            }
        }
    }
    (pinv_solve(m, b), true)
}

/// Minimum-norm least-squares solution via SVD with a relative cutoff.
pub fn pinv_solve(m: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    let svd = m.clone().svd(true, true);
    let smax = svd.singular_values.iter().fold(0.0_f64, |a, &v| a.max(v));
    let eps = smax * 1e-12 * (m.nrows().max(m.ncols()) as f64);
    svd.solve(b, eps.max(f64::MIN_POSITIVE))
        .unwrap_or_else(|_| DMatrix::zeros(m.ncols(), b.ncols()))
}

/// Least-squares slope of `ys` against `xs`.
pub fn fit_slope(xs: &[f64], ys: &[f64]) -> f64 {
    assert_eq!(xs.len(), ys.len());
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    sxy / sxx
}

pub fn median(values: &[f64]) -> f64 {
    let mut v: Vec<f64> = values.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn orthonormalize_has_positive_r_diagonal() {
        let mut rng = seeded_rng(1);
        let a = gaussian_matrix(7, 3, &mut rng);
        let q = orthonormalize(&a).unwrap();
        let r = q.transpose() * &a;
        for j in 0..3 {
            assert!(r[(j, j)] > 0.0);
        }
        assert!((q.transpose() * &q - DMatrix::identity(3, 3)).norm() < 1e-13);
    }

    #[test]
    fn orthonormalize_rejects_rank_deficient() {
        let a = DMatrix::from_row_slice(3, 2, &[1.0, 2.0, 2.0, 4.0, 3.0, 6.0]);
        assert!(orthonormalize(&a).is_err());
    }

    #[test]
    fn kron_identity_on_vec() {
        let mut rng = seeded_rng(2);
        let a = gaussian_matrix(2, 2, &mut rng);
        let g = gaussian_matrix(3, 3, &mut rng);
        let h = gaussian_matrix(3, 2, &mut rng);
        let lhs = kron(&a, &g) * vec_of(&h);
        let rhs = vec_of(&(&g * &h * a.transpose()));
        assert!((lhs - rhs).norm() < 1e-12);
    }

    #[test]
    fn slope_of_line() {
        let xs = [0.0, 1.0, 2.0, 3.0];
        let ys = [1.0, 3.0, 5.0, 7.0];
        assert!((fit_slope(&xs, &ys) - 2.0).abs() < 1e-14);
    }

    #[test]
    fn psd_solve_falls_back_on_singular() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 0.0]);
        let b = DMatrix::from_row_slice(2, 1, &[2.0, 0.0]);
        let (x, fallback) = solve_psd(&m, &b);
        assert!(fallback);
        assert!((x[(0, 0)] - 2.0).abs() < 1e-12 && x[(1, 0)].abs() < 1e-12);
    }
}
