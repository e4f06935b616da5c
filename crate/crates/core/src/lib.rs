//! Riemannian natural gradient descent (RNGD) on Grassmann manifolds.
//!
//! The crate is organised around six pieces:
//!
//! - [`manifold`]: Grassmann and product-of-spheres geometry (projection,
//!   retractions, exponential map, projector distances).
//! - [`fisher`]: dense and Kronecker-factored Fisher operators, damped
//!   inverse application and a truncated conjugate-gradient fallback.
//! - [`optim`]: the adaptive-regularization RNGD loop, the deterministic
//!   pseudo-inverse RNGD iteration and first-order Riemannian baselines.
//! - [`models`]: low-rank matrix completion, multi-task subspace learning and
//!   a two-layer batch-normalized network.
//! - [`data`]: rating-file loaders, splits, synthetic generators and run logs.
//! - [`verify`]: executable property checks (finite differences, retraction
//!   orders, Monte-Carlo bounds, convergence rates).

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod data;
pub mod error;
pub mod fisher;
pub mod linalg;
pub mod manifold;
pub mod models;
pub mod optim;
pub mod verify;

pub use error::{Error, Result};
pub use manifold::{GrassmannPoint, Manifold, RetractionKind, TangentVector, UnitRowPoint};
