//! Bayesian non-negative matrix factorization with an explicit search for
//! multiple posterior modes.
//!
//! Non-negative factorizations are rarely unique: distinct factor pairs can
//! reconstruct the same data equally well, and a posterior that reports only
//! one of them is misleading. This crate characterizes that multimodality by
//!
//! 1. fitting point solutions with projected-gradient NMF ([`nmf`]),
//! 2. parameterizing the solution set through an invertible change of basis
//!    on the oblique manifold ([`manifold`]),
//! 3. exploring that manifold with a rapidly-exploring random tree ([`rrt`]),
//! 4. assembling the discovered solutions into a mixture-of-Gaussians
//!    variational posterior fit online ([`vi`]), and
//! 5. comparing against Gibbs/HMC/batch-VI baselines ([`samplers`], [`vi`])
//!    with angle-based diversity metrics ([`metrics`]).
//!
//! Matrices are `nalgebra::DMatrix<f64>` throughout; all stochastic routines
//! take explicit seeds or RNGs and are deterministic given them.

pub mod data;
pub mod error;
pub mod manifold;
pub mod metrics;
pub mod model;
pub mod nmf;
pub mod opt;
pub mod rrt;
pub mod samplers;
pub mod vi;

pub use error::{Error, Result};
pub use model::{Factorization, Likelihood, ModelSpec, ParamLayout};
