//! Variational Bayes for elliptic PDE inverse problems.
//!
//! The crate solves `-div(exp(kappa) grad u) = f` with linear finite
//! elements, treats the element-wise log-conductivity `kappa` as unknown and
//! approximates its posterior with Gaussian trial families trained by
//! stochastic variational inference. pCN and HMC samplers provide reference
//! posteriors.

pub mod config;
pub mod error;
pub mod experiment;
pub mod family;
pub mod fem;
pub mod graph;
pub mod likelihood;
pub mod linalg;
pub mod mcmc;
pub mod mesh;
pub mod metrics;
pub mod prior;
pub mod svi;

pub use error::{Error, Result};
