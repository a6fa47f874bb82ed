//! Gaussian process priors over element log-conductivities and the
//! two-component mixture prior of the multimodal problem.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::linalg::{cholesky_inverse, jittered_cholesky, solve_lower};
use crate::mesh::Point;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Relative jitter schedule: start, multiply by ten, give up above max.
pub const JITTER_START: f64 = 1e-8;
pub const JITTER_MAX: f64 = 1e-4;

/// Squared exponential kernel `σ² exp(-r² / 2ℓ²)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SeKernel {
    pub sigma: f64,
    pub length_scale: f64,
}

impl SeKernel {
    pub fn new(sigma: f64, length_scale: f64) -> Result<Self> {
        if !(sigma > 0.0 && length_scale > 0.0 && sigma.is_finite() && length_scale.is_finite()) {
            return Err(Error::Config(format!(
                "kernel needs positive sigma and length scale, got {sigma} and {length_scale}"
            )));
        }
        Ok(SeKernel { sigma, length_scale })
    }

    pub fn eval(&self, x: Point, y: Point) -> f64 {
        let r2 = (x[0] - y[0]).powi(2) + (x[1] - y[1]).powi(2);
        self.sigma * self.sigma * (-0.5 * r2 / (self.length_scale * self.length_scale)).exp()
    }

    pub fn matrix(&self, a: &[Point], b: &[Point]) -> DMatrix<f64> {
        DMatrix::from_fn(a.len(), b.len(), |i, j| self.eval(a[i], b[j]))
    }
}

/// `N(m, K)` with the jittered Cholesky factor, its inverse and log-determinant
/// cached. `cov()` returns the jittered matrix that all densities use.
#[derive(Debug, Clone)]
pub struct GaussianPrior {
    mean: DVector<f64>,
    cov: DMatrix<f64>,
    chol: DMatrix<f64>,
    precision: DMatrix<f64>,
    log_det: f64,
    jitter: f64,
}

impl GaussianPrior {
    /// `scale` sets the jitter units (the kernel variance).
    pub fn from_covariance(mean: DVector<f64>, cov: DMatrix<f64>, scale: f64) -> Result<Self> {
        let n = mean.len();
        if n == 0 {
            return Err(Error::Config("prior needs at least one component".into()));
        }
        if cov.nrows() != n || cov.ncols() != n {
            return Err(Error::dims("prior covariance", n, cov.nrows()));
        }
        let (chol, jitter) = jittered_cholesky(&cov, scale, JITTER_START, JITTER_MAX)?;
        let mut cov = cov;
        for i in 0..n {
            cov[(i, i)] += jitter;
        }
        let log_det = 2.0 * chol.diagonal().iter().map(|v| v.ln()).sum::<f64>();
        let precision = cholesky_inverse(&chol);
        Ok(GaussianPrior { mean, cov, chol, precision, log_det, jitter })
    }

    /// Zero-mean GP prior evaluated at element centroids.
    pub fn se(kernel: SeKernel, centroids: &[Point]) -> Result<Self> {
        let k = kernel.matrix(centroids, centroids);
        Self::from_covariance(DVector::zeros(centroids.len()), k, kernel.sigma * kernel.sigma)
    }

    /// `N(0, σ² I)`.
    pub fn iid(n: usize, sigma: f64) -> Result<Self> {
        Self::from_covariance(DVector::zeros(n), DMatrix::identity(n, n) * (sigma * sigma), sigma * sigma)
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn cov(&self) -> &DMatrix<f64> {
        &self.cov
    }

    /// Lower Cholesky factor of `cov()`.
    pub fn chol(&self) -> &DMatrix<f64> {
        &self.chol
    }

    pub fn precision(&self) -> &DMatrix<f64> {
        &self.precision
    }

    pub fn log_det(&self) -> f64 {
        self.log_det
    }

    pub fn jitter(&self) -> f64 {
        self.jitter
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> DVector<f64> {
        let eps = DVector::from_fn(self.dim(), |_, _| rng.sample::<f64, _>(StandardNormal));
        &self.mean + &self.chol * eps
    }

    pub fn log_density(&self, x: &DVector<f64>) -> f64 {
        let z = solve_lower(&self.chol, &(x - &self.mean));
        -0.5 * (self.dim() as f64 * LN_2PI + self.log_det + z.norm_squared())
    }

    pub fn grad_log_density(&self, x: &DVector<f64>) -> DVector<f64> {
        -(&self.precision * (x - &self.mean))
    }
}

/// Closed-form GP regression: posterior mean and covariance at `xs` given
/// noise-free values at `x`.
pub fn gp_condition(
    kernel: SeKernel,
    x: &[Point],
    values: &DVector<f64>,
    xs: &[Point],
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    if values.len() != x.len() {
        return Err(Error::dims("conditioning values", x.len(), values.len()));
    }
    let kxx = kernel.matrix(x, x);
    let (l, _) = jittered_cholesky(&kxx, kernel.sigma * kernel.sigma, JITTER_START, JITTER_MAX)?;
    let ksx = kernel.matrix(xs, x);
    let kss = kernel.matrix(xs, xs);
    // V = L⁻¹ K(X, X*)
    let v = l.solve_lower_triangular(&ksx.transpose()).expect("factor has positive diagonal");
    let a = solve_lower(&l, values);
    let mean = v.transpose() * a;
    let cov = kss - v.transpose() * v;
    Ok((mean, cov))
}

/// Finite mixture of Gaussians with fixed weights.
#[derive(Debug, Clone)]
pub struct MixturePrior {
    weights: Vec<f64>,
    components: Vec<GaussianPrior>,
}

impl MixturePrior {
    pub fn new(weights: Vec<f64>, components: Vec<GaussianPrior>) -> Result<Self> {
        if weights.len() != components.len() || components.is_empty() {
            return Err(Error::Config("mixture needs one weight per component".into()));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-12 || weights.iter().any(|&w| !(w > 0.0)) {
            return Err(Error::Config(format!("mixture weights must be positive and sum to 1, got {total}")));
        }
        let d = components[0].dim();
        if let Some(c) = components.iter().find(|c| c.dim() != d) {
            return Err(Error::dims("mixture component", d, c.dim()));
        }
        Ok(MixturePrior { weights, components })
    }

    /// Equal mixture over `(kappa, ln u_R)`: low conductivity with a
    /// vanishing right boundary value, or moderate conductivity with a unit one.
    pub fn multimodal() -> Self {
        let cov = DMatrix::identity(2, 2) * 0.5;
        let a = DVector::from_vec(vec![0.1f64.ln(), 1e-8f64.ln()]);
        let b = DVector::from_vec(vec![2.0f64.ln(), 0.0]);
        let comps = vec![
            GaussianPrior::from_covariance(a, cov.clone(), 0.5).expect("diagonal covariance"),
            GaussianPrior::from_covariance(b, cov, 0.5).expect("diagonal covariance"),
        ];
        MixturePrior::new(vec![0.5, 0.5], comps).expect("valid mixture")
    }

    pub fn dim(&self) -> usize {
        self.components[0].dim()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn components(&self) -> &[GaussianPrior] {
        &self.components
    }

    pub fn log_density(&self, x: &DVector<f64>) -> f64 {
        let terms: Vec<f64> =
            self.components.iter().zip(&self.weights).map(|(c, w)| w.ln() + c.log_density(x)).collect();
        log_sum_exp(&terms)
    }

    pub fn grad_log_density(&self, x: &DVector<f64>) -> DVector<f64> {
        let terms: Vec<f64> =
            self.components.iter().zip(&self.weights).map(|(c, w)| w.ln() + c.log_density(x)).collect();
        let lse = log_sum_exp(&terms);
        let mut g = DVector::zeros(self.dim());
        for (c, t) in self.components.iter().zip(&terms) {
            g += c.grad_log_density(x) * (t - lse).exp();
        }
        g
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> DVector<f64> {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        for (c, w) in self.components.iter().zip(&self.weights) {
            acc += w;
            if u < acc {
                return c.sample(rng);
            }
        }
        self.components.last().unwrap().sample(rng)
    }
}

pub fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}
