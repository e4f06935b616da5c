//! Single-output two-layer ReLU network with batch normalization.
//!
//! `f(x, θ) = (1/√m) Σ_j a_j ReLU(θ_jᵀ(x − μ) / √(θ_jᵀVθ_j))`
//!
//! The output is invariant to the scale of each hidden weight vector, so the
//! hidden layer lives on a product of unit spheres ([`UnitRowPoint`]). The
//! output weights `a_j ∈ {−1, +1}` stay fixed.

use nalgebra::{DMatrix, DVector};

use super::{check_batch, map_batch, Jacobian, Metrics, ModelProblem, OutputModel};
use crate::error::{Error, Result};
use crate::fisher::{exact_refim, FisherOperator};
use crate::linalg::{min_sym_eigenvalue, SeededRng};
use crate::manifold::{Manifold, TangentVector, UnitRowPoint};

/// Largest tangent dimension for which a dense Fisher matrix is assembled.
pub const DENSE_FISHER_LIMIT: usize = 2048;

#[derive(Clone, Debug)]
pub struct TwoLayerBnNet {
    a: DVector<f64>,
    v: DMatrix<f64>,
    mu: DVector<f64>,
    sigma_v: f64,
}

impl TwoLayerBnNet {
    pub fn new(a: DVector<f64>, v: DMatrix<f64>, mu: DVector<f64>) -> Result<Self> {
        if a.iter().any(|x| x.abs() != 1.0) {
            return Err(Error::contract("output weights must be ±1"));
        }
        let n = v.nrows();
        if v.ncols() != n || mu.len() != n {
            return Err(Error::dim("covariance and mean must match the input dimension"));
        }
        if (&v - v.transpose()).norm() > 1e-12 * v.norm() {
            return Err(Error::contract("covariance is not symmetric"));
        }
        let sigma_v = min_sym_eigenvalue(&v);
        if !(sigma_v > 0.0) {
            return Err(Error::contract(format!("covariance is not positive definite (min eigenvalue {sigma_v:e})")));
        }
        Ok(Self { a, v, mu, sigma_v })
    }

    /// `V = I/n` and `μ = 0`, the moments of the uniform distribution on the sphere.
    pub fn with_population_stats(a: DVector<f64>, n: usize) -> Result<Self> {
        Self::new(a, DMatrix::identity(n, n) / n as f64, DVector::zeros(n))
    }

    /// Empirical mean and covariance of the rows of `xs`, shrunk towards
    /// `(tr V / n)·I` by `shrinkage ∈ [0, 1]`.
    pub fn from_inputs(a: DVector<f64>, xs: &DMatrix<f64>, shrinkage: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&shrinkage) {
            return Err(Error::contract("shrinkage must lie in [0, 1]"));
        }
        let (big_n, n) = xs.shape();
        if big_n == 0 {
            return Err(Error::contract("no inputs"));
        }
        let mu = xs.row_mean().transpose();
        let mut centered = xs.clone();
        for mut row in centered.row_iter_mut() {
            row -= mu.transpose();
        }
        let cov = centered.transpose() * &centered / big_n as f64;
        let target = DMatrix::identity(n, n) * (cov.trace() / n as f64);
        let v = cov * (1.0 - shrinkage) + target * shrinkage;
        Self::new(a, crate::linalg::symmetrize(&v), mu)
    }

    pub fn hidden(&self) -> usize {
        self.a.len()
    }

    pub fn input_dim(&self) -> usize {
        self.v.nrows()
    }

    pub fn output_weights(&self) -> &DVector<f64> {
        &self.a
    }

    pub fn covariance(&self) -> &DMatrix<f64> {
        &self.v
    }

    /// Smallest eigenvalue of the covariance.
    pub fn sigma_v(&self) -> f64 {
        self.sigma_v
    }

    fn check_theta(&self, theta: &DMatrix<f64>) -> Result<()> {
        if theta.shape() != (self.hidden(), self.input_dim()) {
            return Err(Error::dim(format!(
                "weights {:?} for a network with {} hidden units in dimension {}",
                theta.shape(),
                self.hidden(),
                self.input_dim()
            )));
        }
        Ok(())
    }

    /// `Vθ_j` for every row, and `q_j = θ_jᵀVθ_j`.
    fn whitening(&self, theta: &DMatrix<f64>) -> Result<(DMatrix<f64>, DVector<f64>)> {
        let vt = theta * &self.v;
        let q = DVector::from_iterator(theta.nrows(), (0..theta.nrows()).map(|j| theta.row(j).dot(&vt.row(j))));
        if q.iter().any(|&v| !(v > 0.0)) {
            return Err(Error::numerical("non-positive normalizer θᵀVθ"));
        }
        Ok((vt, q))
    }

    /// Network output for arbitrary (not necessarily unit) hidden weights.
    pub fn forward_raw(&self, theta: &DMatrix<f64>, x: &DVector<f64>) -> Result<f64> {
        self.check_theta(theta)?;
        if x.len() != self.input_dim() {
            return Err(Error::dim("input dimension mismatch"));
        }
        let (_, q) = self.whitening(theta)?;
        let pre = theta * (x - &self.mu);
        let sum: f64 = (0..self.hidden()).map(|j| self.a[j] * (pre[j] / q[j].sqrt()).max(0.0)).sum();
        Ok(sum / (self.hidden() as f64).sqrt())
    }

    pub fn forward(&self, theta: &UnitRowPoint, x: &DVector<f64>) -> Result<f64> {
        self.forward_raw(theta.matrix(), x)
    }

    /// `u(θ)` over the rows of `xs`.
    pub fn output_vec(&self, theta: &UnitRowPoint, xs: &DMatrix<f64>) -> Result<DVector<f64>> {
        let t = theta.matrix();
        self.check_theta(t)?;
        if xs.ncols() != self.input_dim() {
            return Err(Error::dim("input dimension mismatch"));
        }
        let (_, q) = self.whitening(t)?;
        let scale = 1.0 / (self.hidden() as f64).sqrt();
        let centered = self.center(xs);
        // pre[(j, i)] = θ_jᵀ x̃_i
        let pre = t * centered.transpose();
        Ok(DVector::from_fn(xs.nrows(), |i, _| {
            (0..self.hidden()).map(|j| self.a[j] * (pre[(j, i)] / q[j].sqrt()).max(0.0)).sum::<f64>() * scale
        }))
    }

    fn center(&self, xs: &DMatrix<f64>) -> DMatrix<f64> {
        let mut c = xs.clone();
        for mut row in c.row_iter_mut() {
            row -= self.mu.transpose();
        }
        c
    }

    /// Riemannian Jacobian of `u(θ)`; row `i` has block
    /// `(a_j/√m)·1[θ_jᵀx̃_i > 0]·φ_i(θ_j)` with
    /// `φ_i(u) = x̃_i/√(uᵀVu) − Vu·uᵀx̃_i/(uᵀVu)^{3/2}`.
    pub fn jacobian(&self, theta: &UnitRowPoint, xs: &DMatrix<f64>) -> Result<Jacobian<UnitRowPoint>> {
        let t = theta.matrix();
        self.check_theta(t)?;
        if xs.ncols() != self.input_dim() {
            return Err(Error::dim("input dimension mismatch"));
        }
        let (vt, q) = self.whitening(t)?;
        let centered = self.center(xs);
        let pre = t * centered.transpose();
        let scale = 1.0 / (self.hidden() as f64).sqrt();
        let (m, n) = t.shape();
        let rows = map_batch(&super::full_batch(xs.nrows()), |i| {
            let x = centered.row(i);
            let mut block = DMatrix::zeros(m, n);
            for j in 0..m {
                let s = pre[(j, i)];
                if s <= 0.0 {
                    continue;
                }
                let c = self.a[j] * scale;
                let qj = q[j];
                let along = c / qj.sqrt();
                let against = c * s / (qj * qj.sqrt());
                for k in 0..n {
                    block[(j, k)] = along * x[k] - against * vt[(j, k)];
                }
            }
            Ok(block)
        })?;
        Jacobian::new(theta, rows)
    }
}

/// `φ(u) = x̃/√(uᵀVu) − Vu·uᵀx̃/(uᵀVu)^{3/2}` for one input.
pub fn phi_direction(v: &DMatrix<f64>, u: &DVector<f64>, x: &DVector<f64>) -> DVector<f64> {
    let vu = v * u;
    let q = u.dot(&vu);
    x / q.sqrt() - vu * (u.dot(x) / (q * q.sqrt()))
}

/// The network together with a training set, as an optimization problem.
#[derive(Clone, Debug)]
pub struct BnProblem {
    net: TwoLayerBnNet,
    xs: DMatrix<f64>,
    ys: DVector<f64>,
    test: Option<(DMatrix<f64>, DVector<f64>)>,
}

impl BnProblem {
    pub fn new(net: TwoLayerBnNet, xs: DMatrix<f64>, ys: DVector<f64>) -> Result<Self> {
        if xs.nrows() == 0 || xs.nrows() != ys.len() || xs.ncols() != net.input_dim() {
            return Err(Error::dim("inputs and targets do not match the network"));
        }
        Ok(Self { net, xs, ys, test: None })
    }

    pub fn with_test(mut self, xs: DMatrix<f64>, ys: DVector<f64>) -> Result<Self> {
        if xs.nrows() != ys.len() || xs.ncols() != self.net.input_dim() {
            return Err(Error::dim("test inputs and targets do not match the network"));
        }
        self.test = Some((xs, ys));
        Ok(self)
    }

    pub fn net(&self) -> &TwoLayerBnNet {
        &self.net
    }

    pub fn inputs(&self) -> &DMatrix<f64> {
        &self.xs
    }

    /// Replaces the targets, e.g. to start from a zero residual.
    pub fn with_targets(mut self, ys: DVector<f64>) -> Result<Self> {
        if ys.len() != self.xs.nrows() {
            return Err(Error::dim("target count mismatch"));
        }
        self.ys = ys;
        Ok(self)
    }

    fn batch_inputs(&self, batch: &[usize]) -> (DMatrix<f64>, DVector<f64>) {
        (
            self.xs.select_rows(batch.iter()),
            DVector::from_iterator(batch.len(), batch.iter().map(|&i| self.ys[i])),
        )
    }
}

impl ModelProblem for BnProblem {
    type Point = UnitRowPoint;

    fn num_samples(&self) -> usize {
        self.xs.nrows()
    }

    fn loss(&self, point: &UnitRowPoint, batch: &[usize]) -> Result<f64> {
        check_batch(batch, self.num_samples())?;
        let (xs, ys) = self.batch_inputs(batch);
        let r = self.net.output_vec(point, &xs)? - ys;
        Ok(0.5 * r.norm_squared() / batch.len() as f64)
    }

    fn loss_grad(&self, point: &UnitRowPoint, batch: &[usize]) -> Result<(f64, TangentVector<UnitRowPoint>)> {
        check_batch(batch, self.num_samples())?;
        let (xs, ys) = self.batch_inputs(batch);
        let r = self.net.output_vec(point, &xs)? - ys;
        let b = batch.len() as f64;
        let j = self.net.jacobian(point, &xs)?;
        Ok((0.5 * r.norm_squared() / b, j.adjoint(&(r / b))?))
    }

    /// Gauss–Newton Fisher `(1/|B|) Σ vec(J_i) vec(J_i)ᵀ`, assembled densely.
    fn fisher(&self, point: &UnitRowPoint, batch: &[usize]) -> Result<FisherOperator> {
        check_batch(batch, self.num_samples())?;
        let (m, n) = point.shape();
        if m * n > DENSE_FISHER_LIMIT {
            return Err(Error::Config(format!(
                "dense Fisher for {m}x{n} weights exceeds {DENSE_FISHER_LIMIT} coordinates"
            )));
        }
        let (xs, _) = self.batch_inputs(batch);
        let j = self.net.jacobian(point, &xs)?;
        let samples: Vec<_> = j
            .rows()
            .iter()
            .map(|r| TangentVector::new(point, r.clone()))
            .collect::<Result<_>>()?;
        Ok(exact_refim(&samples)?.into())
    }

    /// Mean squared output error.
    fn metrics(&self, point: &UnitRowPoint) -> Result<Metrics> {
        let train = (self.net.output_vec(point, &self.xs)? - &self.ys).norm_squared() / self.ys.len() as f64;
        let test = match &self.test {
            Some((xs, ys)) if !ys.is_empty() => {
                Some((self.net.output_vec(point, xs)? - ys).norm_squared() / ys.len() as f64)
            }
            _ => None,
        };
        Ok(Metrics { train, test })
    }

    fn random_point(&self, rng: &mut SeededRng) -> Result<UnitRowPoint> {
        UnitRowPoint::random(self.net.hidden(), self.net.input_dim(), rng)
    }
}

impl OutputModel for BnProblem {
    type Point = UnitRowPoint;

    fn outputs(&self, point: &UnitRowPoint) -> Result<DVector<f64>> {
        self.net.output_vec(point, &self.xs)
    }

    fn targets(&self) -> &DVector<f64> {
        &self.ys
    }

    fn jacobian(&self, point: &UnitRowPoint) -> Result<Jacobian<UnitRowPoint>> {
        self.net.jacobian(point, &self.xs)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth_nn;
    use crate::linalg::{gaussian_matrix, seeded_rng};
    use crate::manifold::{inner, project, retract, RetractionKind};
    use crate::models::full_batch;

    fn instance(seed: u64) -> (BnProblem, UnitRowPoint) {
        let inst = synth_nn(5, 6, 8, seed).unwrap();
        let net = TwoLayerBnNet::with_population_stats(inst.a.clone(), 5).unwrap();
        (BnProblem::new(net, inst.xs, inst.ys).unwrap(), inst.theta0)
    }

    /// Smallest |θ_jᵀx_i| over all pairs.
    fn kink_margin(theta: &UnitRowPoint, xs: &DMatrix<f64>) -> f64 {
        (theta.matrix() * xs.transpose()).iter().fold(f64::INFINITY, |a, v| a.min(v.abs()))
    }

    #[test]
    fn output_is_scale_invariant_per_row() {
        let (prob, theta) = instance(60);
        let mut scaled = theta.matrix().clone();
        for (j, mut row) in scaled.row_iter_mut().enumerate() {
            row *= 0.1 + j as f64 * 3.7;
        }
        for i in 0..6 {
            let x = prob.inputs().row(i).transpose();
            let a = prob.net().forward(&theta, &x).unwrap();
            let b = prob.net().forward_raw(&scaled, &x).unwrap();
            assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn single_unit_hand_value_and_sign_flip() {
        let x = DVector::from_column_slice(&[0.6, 0.8]);
        let net = TwoLayerBnNet::new(DVector::from_element(1, 1.0), DMatrix::identity(2, 2), DVector::zeros(2)).unwrap();
        let theta = UnitRowPoint::new(DMatrix::from_row_slice(1, 2, &[0.6, 0.8])).unwrap();
        assert!((net.forward(&theta, &x).unwrap() - 1.0).abs() < 1e-15);
        let (prob, theta) = instance(61);
        let flipped = TwoLayerBnNet::with_population_stats(-prob.net().output_weights().clone(), 5).unwrap();
        let u = prob.net().output_vec(&theta, prob.inputs()).unwrap();
        let v = flipped.output_vec(&theta, prob.inputs()).unwrap();
        assert!((u + v).norm() < 1e-14);
    }

    #[test]
    fn jacobian_hand_instance() {
        let alpha: f64 = 0.4;
        let xs = DMatrix::from_row_slice(1, 2, &[alpha.cos(), alpha.sin()]);
        let net = TwoLayerBnNet::new(DVector::from_element(1, -1.0), DMatrix::identity(2, 2), DVector::zeros(2)).unwrap();
        let theta = UnitRowPoint::new(DMatrix::from_row_slice(1, 2, &[1.0, 0.0])).unwrap();
        let j = net.jacobian(&theta, &xs).unwrap();
        // φ(θ) = x − θθᵀx = (0, sin α), scaled by a₁ = −1
        let expected = DMatrix::from_row_slice(1, 2, &[0.0, -alpha.sin()]);
        assert!((&j.rows()[0] - expected).norm() < 1e-15);
        let phi = phi_direction(&DMatrix::identity(2, 2), &DVector::from_column_slice(&[1.0, 0.0]), &xs.row(0).transpose());
        assert!((phi - DVector::from_column_slice(&[0.0, alpha.sin()])).norm() < 1e-15);
    }

    #[test]
    fn jacobian_matches_finite_differences_and_is_tangent() {
        let (prob, theta) = instance(62);
        assert!(kink_margin(&theta, prob.inputs()) > 1e-3);
        let j = prob.net().jacobian(&theta, prob.inputs()).unwrap();
        let mut rng = seeded_rng(63);
        for row in j.rows() {
            assert!(theta.tangency_residual(row) <= 1e-10);
        }
        for _ in 0..10 {
            let xi = project(&theta, &gaussian_matrix(8, 5, &mut rng)).unwrap();
            let xi = xi.scaled(1.0 / xi.norm());
            let h = 1e-6;
            let plus = prob.net().output_vec(&retract(&theta, &xi, h, RetractionKind::Exponential).unwrap(), prob.inputs()).unwrap();
            let minus = prob.net().output_vec(&retract(&theta, &xi, -h, RetractionKind::Exponential).unwrap(), prob.inputs()).unwrap();
            let fd = (plus - minus) / (2.0 * h);
            let an = j.apply(&xi).unwrap();
            assert!((&fd - &an).norm() <= 1e-4 * an.norm().max(1e-8));
        }
        let r = DVector::from_fn(6, |i, _| i as f64 - 2.5);
        let adj = j.adjoint(&r).unwrap();
        for k in 0..8 {
            assert!(theta.matrix().row(k).dot(&adj.mat().row(k)).abs() <= 1e-10);
        }
    }

    #[test]
    fn gradient_matches_central_differences() {
        let (prob, theta) = instance(64);
        let batch = full_batch(6);
        let (_, g) = prob.loss_grad(&theta, &batch).unwrap();
        for k in 0..8 {
            assert!(theta.matrix().row(k).dot(&g.mat().row(k)).abs() <= 1e-10);
        }
        let mut rng = seeded_rng(65);
        for _ in 0..10 {
            let xi = project(&theta, &gaussian_matrix(8, 5, &mut rng)).unwrap();
            let xi = xi.scaled(1.0 / xi.norm());
            let h = f64::EPSILON.cbrt();
            let plus = prob.loss(&retract(&theta, &xi, h, RetractionKind::Polar).unwrap(), &batch).unwrap();
            let minus = prob.loss(&retract(&theta, &xi, -h, RetractionKind::Polar).unwrap(), &batch).unwrap();
            let fd = (plus - minus) / (2.0 * h);
            let an = inner(&g, &xi).unwrap();
            assert!((fd - an).abs() <= 1e-5 * an.abs().max(g.norm()), "fd {fd} analytic {an}");
        }
    }

    #[test]
    fn gauss_newton_fisher_is_psd() {
        let (prob, theta) = instance(66);
        let f = prob.fisher(&theta, &full_batch(6)).unwrap();
        let mut rng = seeded_rng(67);
        for _ in 0..50 {
            let h = project(&theta, &gaussian_matrix(8, 5, &mut rng)).unwrap();
            assert!(inner(&crate::fisher::apply(&f, &h).unwrap(), &h).unwrap() >= -1e-12);
        }
    }

    #[test]
    fn empirical_statistics_constructor() {
        let mut rng = seeded_rng(68);
        let xs = gaussian_matrix(50, 4, &mut rng);
        let net = TwoLayerBnNet::from_inputs(DVector::from_element(3, 1.0), &xs, 0.1).unwrap();
        assert!(net.sigma_v() > 0.0);
        assert!(TwoLayerBnNet::from_inputs(DVector::from_element(3, 1.0), &xs.rows(0, 2).into_owned(), 0.0).is_err());
        assert!(TwoLayerBnNet::new(DVector::from_element(1, 0.5), DMatrix::identity(2, 2), DVector::zeros(2)).is_err());
    }
}
