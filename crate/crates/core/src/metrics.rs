//! Posterior evaluation: error norms, the boundary-flux quantity of
//! interest, summaries and empirical precision matrices.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::family::{GaussianMixtureTrial, GaussianTrial};
use crate::fem::Poisson;
use crate::mesh::BoundaryFacet;

pub const DEFAULT_SAMPLES: usize = 10_000;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PosteriorSampleSet {
    pub samples: Vec<Vec<f64>>,
    pub method: String,
    pub seed: u64,
    pub config_hash: String,
}

impl PosteriorSampleSet {
    pub fn new(samples: Vec<Vec<f64>>, method: &str, seed: u64, config_hash: &str) -> Result<Self> {
        check_samples(&samples)?;
        Ok(PosteriorSampleSet { samples, method: method.into(), seed, config_hash: config_hash.into() })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.samples[0].len()
    }
}

fn check_samples(samples: &[Vec<f64>]) -> Result<usize> {
    let first = samples.first().ok_or_else(|| Error::DataMismatch("empty sample set".into()))?;
    let n = first.len();
    for s in samples {
        if s.len() != n {
            return Err(Error::dims("sample length", n, s.len()));
        }
        if s.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("posterior sample"));
        }
    }
    Ok(n)
}

/// `s` fresh draws from a fitted trial.
pub fn sample_trial<T: GaussianTrial>(q: &T, s: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..s).map(|_| q.draw(&mut rng).iter().cloned().collect()).collect()
}

pub fn sample_mixture(q: &GaussianMixtureTrial, s: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..s).map(|_| q.draw(&mut rng).iter().cloned().collect()).collect()
}

pub fn sample_mean(samples: &[Vec<f64>]) -> Result<Vec<f64>> {
    let n = check_samples(samples)?;
    let k = samples.len() as f64;
    let mut m = vec![0.0; n];
    for s in samples {
        for (a, v) in m.iter_mut().zip(s) {
            *a += v;
        }
    }
    Ok(m.into_iter().map(|v| v / k).collect())
}

/// `‖mean(samples) − κ_true‖₂`.
pub fn mean_kappa_error(samples: &[Vec<f64>], truth: &[f64]) -> Result<f64> {
    let m = sample_mean(samples)?;
    if m.len() != truth.len() {
        return Err(Error::dims("true kappa", m.len(), truth.len()));
    }
    Ok(m.iter().zip(truth).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt())
}

fn euclid(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

/// `(1/S) Σ ‖u(κ⁽ˢ⁾) − u(κ_true)‖₂` over nodal values.
pub fn expected_solution_error(samples: &[Vec<f64>], truth: &[f64], problem: &Poisson) -> Result<f64> {
    check_samples(samples)?;
    let u_true = problem.solve(truth)?.u;
    let errs: Vec<f64> = samples
        .par_iter()
        .enumerate()
        .map(|(i, s)| {
            problem
                .solve(s)
                .map(|sol| euclid(&sol.u, &u_true))
                .map_err(|e| Error::SampleFailed { index: i, source: Box::new(e) })
        })
        .collect::<Result<_>>()?;
    Ok(errs.iter().sum::<f64>() / samples.len() as f64)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct QoiSummary {
    pub values: Vec<f64>,
    pub excluded: usize,
    pub mean: f64,
    pub std: f64,
    pub p05: f64,
    pub p95: f64,
}

/// Linear interpolation between order statistics.
pub fn percentile(sorted: &[f64], p: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Log boundary flux for every sample. Samples whose total flux is not
/// positive are dropped and counted.
pub fn qoi_distribution(samples: &[Vec<f64>], problem: &Poisson, facets: &[BoundaryFacet]) -> Result<QoiSummary> {
    check_samples(samples)?;
    let per: Vec<Option<f64>> = samples
        .par_iter()
        .enumerate()
        .map(|(i, s)| {
            let sol = problem.solve(s).map_err(|e| Error::SampleFailed { index: i, source: Box::new(e) })?;
            match problem.boundary_flux(s, &sol.u, facets) {
                Ok(r) => Ok(Some(r)),
                Err(Error::NonPositiveFlux(_)) => Ok(None),
                Err(e) => Err(Error::SampleFailed { index: i, source: Box::new(e) }),
            }
        })
        .collect::<Result<_>>()?;
    let values: Vec<f64> = per.iter().flatten().cloned().collect();
    let excluded = per.len() - values.len();
    if values.is_empty() {
        return Err(Error::NonPositiveFlux(0.0));
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let std = if values.len() > 1 {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    let mut sorted = values.clone();
    sorted.sort_by(f64::total_cmp);
    Ok(QoiSummary { p05: percentile(&sorted, 0.05), p95: percentile(&sorted, 0.95), values, excluded, mean, std })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PosteriorSummary {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

pub fn posterior_summary(samples: &[Vec<f64>]) -> Result<PosteriorSummary> {
    if samples.len() < 2 {
        return Err(Error::DataMismatch("a posterior summary needs at least two samples".into()));
    }
    let mean = sample_mean(samples)?;
    let k = samples.len() as f64;
    let mut var = vec![0.0; mean.len()];
    for s in samples {
        for i in 0..mean.len() {
            var[i] += (s[i] - mean[i]).powi(2);
        }
    }
    Ok(PosteriorSummary { mean, std: var.into_iter().map(|v| (v / (k - 1.0)).sqrt()).collect() })
}

pub fn sample_covariance(samples: &[Vec<f64>]) -> Result<DMatrix<f64>> {
    let n = check_samples(samples)?;
    if samples.len() < 2 {
        return Err(Error::DataMismatch("covariance needs at least two samples".into()));
    }
    let m = DVector::from_vec(sample_mean(samples)?);
    let mut c = DMatrix::zeros(n, n);
    for s in samples {
        let d = DVector::from_column_slice(s) - &m;
        c.syger(1.0, &d, &d, 1.0);
    }
    c.fill_upper_triangle_with_lower_triangle();
    Ok(c / (samples.len() as f64 - 1.0))
}

/// `1e-6` times the mean diagonal of the sample covariance.
pub fn default_ridge(samples: &[Vec<f64>]) -> Result<f64> {
    let c = sample_covariance(samples)?;
    Ok(1e-6 * c.diagonal().mean())
}

/// Inverse of the sample covariance plus `ridge · I`.
pub fn empirical_precision(samples: &[Vec<f64>], ridge: f64) -> Result<DMatrix<f64>> {
    let n = check_samples(samples)?;
    if samples.len() < n + 10 {
        return Err(Error::DataMismatch(format!(
            "empirical precision needs at least {} samples, got {}",
            n + 10,
            samples.len()
        )));
    }
    if ridge < 0.0 {
        return Err(Error::Config("ridge must be non-negative".into()));
    }
    let mut c = sample_covariance(samples)?;
    for i in 0..n {
        c[(i, i)] += ridge;
    }
    let scale = c.diagonal().amax();
    let chol = nalgebra::Cholesky::new(c).ok_or(Error::SingularCovariance)?;
    let d = chol.l_dirty().diagonal();
    if d.iter().any(|v| !(*v > 1e-7 * scale.sqrt())) {
        return Err(Error::SingularCovariance);
    }
    Ok(chol.inverse())
}
