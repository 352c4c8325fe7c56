//! Bayesian nonparametric inference for semi-competing risks.
//!
//! A dependent Dirichlet process mixture with Gaussian-process locations is fit
//! separately to each randomized arm by blocked Gibbs sampling. Posterior draws
//! feed the survival curves and the principal-stratum relative-risk curve
//! `tau(u)`, which is identified through a Gaussian copula indexed by a
//! sensitivity correlation `rho`.

pub mod baselines;
pub mod bvn;
pub mod config;
pub mod data;
pub mod error;
pub mod estimands;
pub mod gibbs;
pub mod harness;
pub mod kernel;
pub mod model;
pub mod quadrature;
pub mod rng;
pub mod sim;
pub mod validation;

pub use error::{Error, Result};
