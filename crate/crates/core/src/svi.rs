//! Monte Carlo ELBO estimation, ADAM and the moving-average stopping rule.

use std::path::Path;
use std::time::Instant;

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::family::{standard_normal, GaussianMixtureTrial, GaussianTrial};
use crate::likelihood::LogLikelihood;
use crate::prior::{GaussianPrior, MixturePrior};

#[derive(Debug, Clone)]
pub struct ElboEstimate {
    pub value: f64,
    /// Gradient of the ELBO (not the loss) with respect to the trial parameters.
    pub grad: Vec<f64>,
    pub n_svi: usize,
}

fn evaluate_samples<L: LogLikelihood>(lik: &L, xs: &[DVector<f64>]) -> Result<Vec<(f64, Vec<f64>)>> {
    let eval = |(i, x): (usize, &DVector<f64>)| {
        lik.value_and_grad(x.as_slice()).map_err(|e| Error::SampleFailed { index: i, source: Box::new(e) })
    };
    // handing work to a one-thread pool costs more than a cheap solve
    if rayon::current_num_threads() == 1 {
        xs.iter().enumerate().map(eval).collect()
    } else {
        xs.par_iter().enumerate().map(eval).collect()
    }
}

/// `E_q[log p(y | κ)] − KL(q ‖ p₀)` from `n_svi` reparametrised draws, with
/// the closed-form KL.
pub fn estimate_elbo<T: GaussianTrial, L: LogLikelihood, R: Rng + ?Sized>(
    q: &T,
    prior: &GaussianPrior,
    lik: &L,
    n_svi: usize,
    rng: &mut R,
) -> Result<ElboEstimate> {
    if n_svi == 0 {
        return Err(Error::Config("N_SVI must be at least 1".into()));
    }
    if lik.dim() != q.dim() {
        return Err(Error::dims("likelihood dimension", q.dim(), lik.dim()));
    }
    let eps: Vec<Vec<f64>> = (0..n_svi).map(|_| standard_normal(q.dim(), rng)).collect();
    let xs: Vec<DVector<f64>> = eps.iter().map(|e| q.sample_reparam(e)).collect();
    let evals = evaluate_samples(lik, &xs)?;
    let w = 1.0 / n_svi as f64;
    let mut grad = vec![0.0; q.n_params()];
    let mut ll = 0.0;
    let mut pairs = Vec::with_capacity(n_svi);
    for (e, (v, g)) in eps.into_iter().zip(&evals) {
        ll += w * v;
        pairs.push((e, DVector::from_iterator(g.len(), g.iter().map(|x| w * x))));
    }
    q.pullback_sum(&pairs, &mut grad);
    let (kl, kl_grad) = q.kl_to_prior(prior)?;
    for (g, k) in grad.iter_mut().zip(&kl_grad) {
        *g -= k;
    }
    Ok(ElboEstimate { value: ll - kl, grad, n_svi })
}

/// ELBO for a mixture trial under a mixture prior; the KL term is estimated
/// from the same draws. Component selection is uniform and treated as fixed
/// per draw.
pub fn estimate_elbo_mixture<L: LogLikelihood, R: Rng + ?Sized>(
    q: &GaussianMixtureTrial,
    prior: &MixturePrior,
    lik: &L,
    n_svi: usize,
    rng: &mut R,
) -> Result<ElboEstimate> {
    if n_svi == 0 {
        return Err(Error::Config("N_SVI must be at least 1".into()));
    }
    if lik.dim() != q.dim() || prior.dim() != q.dim() {
        return Err(Error::dims("mixture dimension", q.dim(), lik.dim()));
    }
    let draws: Vec<(usize, Vec<f64>)> = (0..n_svi)
        .map(|_| {
            let k = q.select(rng.random());
            (k, standard_normal(q.dim(), rng))
        })
        .collect();
    let xs: Vec<DVector<f64>> = draws.iter().map(|(k, e)| q.sample_reparam(*k, e)).collect();
    let evals = evaluate_samples(lik, &xs)?;
    let w = 1.0 / n_svi as f64;
    let mut value = 0.0;
    let mut grad = vec![0.0; q.params().len()];
    for ((x, (k, e)), (ll, gll)) in xs.iter().zip(&draws).zip(&evals) {
        let dq = q.log_density_grad(x);
        value += w * (ll + prior.log_density(x) - dq.value);
        let gx = (DVector::from_column_slice(gll) + prior.grad_log_density(x) - &dq.grad_x) * w;
        q.pullback(*k, e, &gx, &mut grad);
        for (g, d) in grad.iter_mut().zip(&dq.grad_params) {
            *g -= w * d;
        }
    }
    Ok(ElboEstimate { value, grad, n_svi })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub alpha: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub decay_interval: u64,
    pub decay_rate: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { alpha: 0.01, beta1: 0.9, beta2: 0.99, eps: 1e-8, decay_interval: 2500, decay_rate: 0.96 }
    }
}

impl AdamConfig {
    /// Mean-field runs decay every 1000 steps.
    pub fn mean_field() -> Self {
        AdamConfig { decay_interval: 1000, ..Self::default() }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub cfg: AdamConfig,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl AdamState {
    pub fn new(n: usize, cfg: AdamConfig) -> Self {
        AdamState { cfg, m: vec![0.0; n], v: vec![0.0; n], t: 0 }
    }

    /// Learning rate used at (1-based) step `t`.
    pub fn rate_at(&self, t: u64) -> f64 {
        self.cfg.alpha * self.cfg.decay_rate.powi((t / self.cfg.decay_interval) as i32)
    }

    /// One minimisation step on `params` along the loss gradient `grad`.
    /// Returns the learning rate used. A non-finite gradient leaves both the
    /// state and the parameters untouched.
    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) -> Result<f64> {
        if grad.len() != params.len() || grad.len() != self.m.len() {
            return Err(Error::dims("ADAM gradient", self.m.len(), grad.len()));
        }
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFinite("ADAM gradient"));
        }
        self.t += 1;
        let lr = self.rate_at(self.t);
        let AdamConfig { beta1, beta2, eps, .. } = self.cfg;
        let c1 = 1.0 - beta1.powi(self.t as i32);
        let c2 = 1.0 - beta2.powi(self.t as i32);
        for i in 0..params.len() {
            self.m[i] = beta1 * self.m[i] + (1.0 - beta1) * grad[i];
            self.v[i] = beta2 * self.v[i] + (1.0 - beta2) * grad[i] * grad[i];
            params[i] -= lr * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + eps);
        }
        Ok(lr)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MonitorConfig {
    pub rho: f64,
    pub tau_rel: f64,
    pub warmup: u64,
    pub patience: u64,
    pub max_steps: u64,
}

impl Default for MonitorConfig {
    fn default() -> Self {
        MonitorConfig { rho: 0.99, tau_rel: 1e-4, warmup: 500, patience: 2000, max_steps: 50_000 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Stop {
    Continue,
    Converged,
    StepCap,
}

/// Exponentially weighted averages of the loss and of its per-step decrease.
/// The run has converged once the averaged loss has gone `patience` steps
/// without improving on its best value by more than `tau`, where `tau` is a
/// fraction of the mean decrease per step seen during warm-up.
#[derive(Debug, Clone)]
pub struct ConvergenceMonitor {
    pub cfg: MonitorConfig,
    steps: u64,
    prev: Option<f64>,
    smooth: f64,
    ewma: f64,
    warm_sum: f64,
    tau: Option<f64>,
    best: f64,
    best_step: u64,
}

impl ConvergenceMonitor {
    pub fn new(cfg: MonitorConfig) -> Self {
        ConvergenceMonitor {
            cfg,
            steps: 0,
            prev: None,
            smooth: 0.0,
            ewma: 0.0,
            warm_sum: 0.0,
            tau: None,
            best: f64::INFINITY,
            best_step: 0,
        }
    }

    /// Averaged per-step decrease.
    pub fn ewma(&self) -> f64 {
        self.ewma
    }

    pub fn smoothed_loss(&self) -> f64 {
        self.smooth
    }

    pub fn threshold(&self) -> Option<f64> {
        self.tau
    }

    /// Step at which the averaged loss last improved.
    pub fn best_step(&self) -> u64 {
        self.best_step
    }

    pub fn observe(&mut self, loss: f64) -> Stop {
        self.steps += 1;
        let rho = self.cfg.rho;
        match self.prev {
            None => self.smooth = loss,
            Some(prev) => {
                let dec = prev - loss;
                self.ewma = rho * self.ewma + (1.0 - rho) * dec;
                self.smooth = rho * self.smooth + (1.0 - rho) * loss;
                if self.steps <= self.cfg.warmup {
                    self.warm_sum += dec;
                }
            }
        }
        self.prev = Some(loss);
        if self.steps == self.cfg.warmup.max(2) {
            let mean = self.warm_sum / (self.steps - 1) as f64;
            self.tau = Some(self.cfg.tau_rel * mean.abs());
        }
        if self.steps >= self.cfg.max_steps {
            return Stop::StepCap;
        }
        let Some(tau) = self.tau else { return Stop::Continue };
        if self.steps <= self.cfg.warmup {
            return Stop::Continue;
        }
        if self.smooth < self.best - tau {
            self.best = self.smooth;
            self.best_step = self.steps;
            return Stop::Continue;
        }
        if self.steps - self.best_step >= self.cfg.patience {
            Stop::Converged
        } else {
            Stop::Continue
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub step: u64,
    pub elbo: f64,
    pub lr: f64,
    pub wall_ms: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SviConfig {
    pub n_svi: usize,
    pub adam: AdamConfig,
    pub monitor: MonitorConfig,
    pub seed: u64,
    /// Return the mean iterate since the last improvement instead of the
    /// final one.
    pub tail_average: bool,
}

impl Default for SviConfig {
    fn default() -> Self {
        SviConfig { n_svi: 3, adam: AdamConfig::default(), monitor: MonitorConfig::default(), seed: 0, tail_average: true }
    }
}

#[derive(Debug, Clone)]
pub struct SviResult {
    pub params: Vec<f64>,
    pub trace: Vec<TraceRow>,
    pub stop: Stop,
    pub steps: u64,
    pub wall_seconds: f64,
}

/// Runs ADAM on `-ELBO` until the monitor fires or the cap is reached.
/// `estimate` returns the ELBO and its parameter gradient.
pub fn optimise<F>(init: Vec<f64>, cfg: &SviConfig, mut estimate: F) -> Result<SviResult>
where
    F: FnMut(&[f64], &mut ChaCha8Rng) -> Result<ElboEstimate>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut params = init;
    let mut adam = AdamState::new(params.len(), cfg.adam);
    let mut monitor = ConvergenceMonitor::new(cfg.monitor);
    let mut trace = Vec::new();
    let mut tail = vec![0.0; params.len()];
    let mut tail_n = 0u64;
    let start = Instant::now();
    loop {
        let est = estimate(&params, &mut rng)?;
        if !est.value.is_finite() {
            return Err(Error::NonFinite("ELBO estimate"));
        }
        let loss_grad: Vec<f64> = est.grad.iter().map(|g| -g).collect();
        let lr = adam.step(&mut params, &loss_grad)?;
        trace.push(TraceRow {
            step: adam.t,
            elbo: est.value,
            lr,
            wall_ms: start.elapsed().as_secs_f64() * 1e3,
        });
        let stop = monitor.observe(-est.value);
        if monitor.best_step() == adam.t {
            tail.iter_mut().for_each(|v| *v = 0.0);
            tail_n = 0;
        }
        for (a, p) in tail.iter_mut().zip(&params) {
            *a += p;
        }
        tail_n += 1;
        if stop != Stop::Continue {
            if cfg.tail_average {
                params = tail.iter().map(|a| a / tail_n as f64).collect();
            }
            return Ok(SviResult { params, trace, stop, steps: adam.t, wall_seconds: start.elapsed().as_secs_f64() });
        }
    }
}

/// Fits a Gaussian trial in place.
pub fn fit<T: GaussianTrial, L: LogLikelihood>(
    q: &mut T,
    prior: &GaussianPrior,
    lik: &L,
    cfg: &SviConfig,
) -> Result<SviResult> {
    let mut work = q.clone();
    let res = optimise(q.params().to_vec(), cfg, |p, rng| {
        work.set_params(p)?;
        estimate_elbo(&work, prior, lik, cfg.n_svi, rng)
    })?;
    q.set_params(&res.params)?;
    Ok(res)
}

pub fn fit_mixture<L: LogLikelihood>(
    q: &mut GaussianMixtureTrial,
    prior: &MixturePrior,
    lik: &L,
    cfg: &SviConfig,
) -> Result<SviResult> {
    let mut work = q.clone();
    let res = optimise(q.params().to_vec(), cfg, |p, rng| {
        work.set_params(p)?;
        estimate_elbo_mixture(&work, prior, lik, cfg.n_svi, rng)
    })?;
    q.set_params(&res.params)?;
    Ok(res)
}

pub fn write_trace(path: &Path, trace: &[TraceRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["step", "elbo", "lr", "wall_ms"])?;
    for r in trace {
        w.write_record([r.step.to_string(), format!("{:?}", r.elbo), format!("{:?}", r.lr), format!("{:.3}", r.wall_ms)])?;
    }
    w.flush()?;
    Ok(())
}
