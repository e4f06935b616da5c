//! Application problems: low-rank matrix completion, multi-task subspace
//! learning and a two-layer batch-normalized network.

pub mod bn;
pub mod lrmc;
pub mod msl;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::fisher::FisherOperator;
use crate::linalg::SeededRng;
use crate::manifold::{Manifold, TangentVector};

pub use bn::{BnProblem, TwoLayerBnNet};
pub use lrmc::{LrmcProblem, ObservedColumn, SampleAxis};
pub use msl::{GradientMode, SubspaceLearningProblem};

/// Train and (optional) held-out metric for one point.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Metrics {
    pub train: f64,
    pub test: Option<f64>,
}

/// Loss, gradient and curvature of a finite-sum objective over samples `0..num_samples()`.
///
/// Batches are lists of sample indices; the loss is the batch average.
pub trait ModelProblem: Sync {
    type Point: Manifold;

    fn num_samples(&self) -> usize;

    fn loss(&self, point: &Self::Point, batch: &[usize]) -> Result<f64>;

    /// Loss and Riemannian gradient on `batch`.
    fn loss_grad(&self, point: &Self::Point, batch: &[usize]) -> Result<(f64, TangentVector<Self::Point>)>;

    fn fisher(&self, point: &Self::Point, batch: &[usize]) -> Result<FisherOperator>;

    fn metrics(&self, point: &Self::Point) -> Result<Metrics>;

    fn random_point(&self, rng: &mut SeededRng) -> Result<Self::Point>;
}

pub fn full_batch(n: usize) -> Vec<usize> {
    (0..n).collect()
}

pub(crate) fn check_batch(batch: &[usize], n: usize) -> Result<()> {
    if batch.is_empty() {
        return Err(Error::contract("empty batch"));
    }
    if let Some(&bad) = batch.iter().find(|&&i| i >= n) {
        return Err(Error::contract(format!("sample index {bad} out of range 0..{n}")));
    }
    Ok(())
}

/// Per-sample map in parallel, results in batch order.
pub(crate) fn map_batch<T, F>(batch: &[usize], f: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(usize) -> Result<T> + Sync,
{
    batch.par_iter().map(|&i| f(i)).collect()
}

/// A model with vector output `u(θ) ∈ R^N` and targets `y`, for the square loss `½‖u − y‖²`.
pub trait OutputModel: Sync {
    type Point: Manifold;

    fn outputs(&self, point: &Self::Point) -> Result<DVector<f64>>;

    fn targets(&self) -> &DVector<f64>;

    fn jacobian(&self, point: &Self::Point) -> Result<Jacobian<Self::Point>>;
}

/// Riemannian Jacobian stored as one tangent matrix per output.
#[derive(Clone, Debug)]
pub struct Jacobian<P: Manifold> {
    base: P,
    rows: Vec<DMatrix<f64>>,
}

impl<P: Manifold> Jacobian<P> {
    pub fn new(base: &P, rows: Vec<DMatrix<f64>>) -> Result<Self> {
        if let Some(r) = rows.iter().find(|r| r.shape() != base.shape()) {
            return Err(Error::dim(format!("Jacobian row {:?} does not match point {:?}", r.shape(), base.shape())));
        }
        Ok(Self { base: base.clone(), rows })
    }

    pub fn base(&self) -> &P {
        &self.base
    }

    pub fn rows(&self) -> &[DMatrix<f64>] {
        &self.rows
    }

    pub fn num_outputs(&self) -> usize {
        self.rows.len()
    }

    /// `J·v`.
    pub fn apply(&self, v: &TangentVector<P>) -> Result<DVector<f64>> {
        if !v.base().same_point(&self.base) {
            return Err(Error::contract("tangent vector at a different point than the Jacobian"));
        }
        Ok(DVector::from_iterator(self.rows.len(), self.rows.iter().map(|r| r.dot(v.mat()))))
    }

    /// `Jᵀ·r`, a tangent vector at the base point.
    pub fn adjoint(&self, r: &DVector<f64>) -> Result<TangentVector<P>> {
        if r.len() != self.rows.len() {
            return Err(Error::dim(format!("adjoint needs {} outputs, got {}", self.rows.len(), r.len())));
        }
        let (a, b) = self.base.shape();
        let mut acc = DMatrix::zeros(a, b);
        for (row, &ri) in self.rows.iter().zip(r.iter()) {
            acc += row * ri;
        }
        TangentVector::new(&self.base, acc)
    }

    /// `J Jᵀ`.
    pub fn gram(&self) -> DMatrix<f64> {
        let n = self.rows.len();
        let mut g = DMatrix::zeros(n, n);
        for i in 0..n {
            for k in i..n {
                let v = self.rows[i].dot(&self.rows[k]);
                g[(i, k)] = v;
                g[(k, i)] = v;
            }
        }
        g
    }

    /// `‖J − other‖_F²`.
    pub fn distance_sq(&self, other: &Jacobian<P>) -> Result<f64> {
        if self.rows.len() != other.rows.len() {
            return Err(Error::dim("Jacobians with different output counts"));
        }
        Ok(self.rows.iter().zip(&other.rows).map(|(a, b)| (a - b).norm_squared()).sum())
    }
}
