//! The log-likelihood interface shared by the variational and sampling
//! engines, plus two analytic instances used for calibration.

use crate::error::{Error, Result};

pub trait LogLikelihood: Sync {
    /// Number of parameters.
    fn dim(&self) -> usize;

    /// Log-likelihood and its gradient.
    fn value_and_grad(&self, theta: &[f64]) -> Result<(f64, Vec<f64>)>;

    fn value(&self, theta: &[f64]) -> Result<f64> {
        Ok(self.value_and_grad(theta)?.0)
    }
}

/// A likelihood that ignores its argument.
#[derive(Debug, Clone, Copy)]
pub struct Flat {
    pub dim: usize,
}

impl LogLikelihood for Flat {
    fn dim(&self) -> usize {
        self.dim
    }

    fn value_and_grad(&self, theta: &[f64]) -> Result<(f64, Vec<f64>)> {
        if theta.len() != self.dim {
            return Err(Error::dims("parameter vector", self.dim, theta.len()));
        }
        Ok((0.0, vec![0.0; self.dim]))
    }
}

/// Direct Gaussian observations `y ~ N(theta, diag(var))` of every
/// parameter, an identity forward map.
#[derive(Debug, Clone)]
pub struct DirectGaussian {
    pub y: Vec<f64>,
    pub var: Vec<f64>,
}

impl LogLikelihood for DirectGaussian {
    fn dim(&self) -> usize {
        self.y.len()
    }

    fn value_and_grad(&self, theta: &[f64]) -> Result<(f64, Vec<f64>)> {
        if theta.len() != self.y.len() {
            return Err(Error::dims("parameter vector", self.y.len(), theta.len()));
        }
        let mut v = 0.0;
        let mut g = vec![0.0; theta.len()];
        for i in 0..theta.len() {
            let r = self.y[i] - theta[i];
            v -= 0.5 * (r * r / self.var[i] + (2.0 * std::f64::consts::PI * self.var[i]).ln());
            g[i] = r / self.var[i];
        }
        Ok((v, g))
    }
}
