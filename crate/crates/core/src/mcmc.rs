//! Baseline samplers: preconditioned Crank-Nicolson and Hamiltonian Monte
//! Carlo, with chain storage and effective sample sizes.

use std::path::Path;
use std::time::Instant;

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::family::standard_normal;
use crate::likelihood::LogLikelihood;
use crate::prior::GaussianPrior;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PcnConfig {
    /// Initial innovation; tuned during burn-in when `tune` is set.
    pub beta: f64,
    pub steps: usize,
    pub burn_in: f64,
    pub target_accept: f64,
    pub tune: bool,
}

impl Default for PcnConfig {
    fn default() -> Self {
        PcnConfig { beta: 0.2, steps: 20_000, burn_in: 0.5, target_accept: 0.25, tune: true }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HmcConfig {
    pub step_size: f64,
    pub leapfrog: usize,
    /// Diagonal mass matrix; `None` starts from the identity and adapts it
    /// halfway through warm-up.
    pub mass: Option<Vec<f64>>,
    pub steps: usize,
    pub warmup: f64,
    pub target_accept: f64,
}

impl Default for HmcConfig {
    fn default() -> Self {
        HmcConfig { step_size: 0.1, leapfrog: 10, mass: None, steps: 20_000, warmup: 0.5, target_accept: 0.65 }
    }
}

impl HmcConfig {
    fn validate(&self, dim: usize) -> Result<()> {
        if !(self.step_size > 0.0) || self.leapfrog == 0 {
            return Err(Error::Config("HMC needs a positive step size and at least one leapfrog step".into()));
        }
        if let Some(m) = &self.mass {
            if m.len() != dim {
                return Err(Error::dims("mass matrix", dim, m.len()));
            }
            if m.iter().any(|v| !(*v > 0.0)) {
                return Err(Error::Config("mass matrix must be positive".into()));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct PcnStep {
    pub kappa: DVector<f64>,
    pub phi: f64,
    pub accepted: bool,
}

/// One pCN move. `potential` is `Φ = -log p(y | κ)` up to a constant; a
/// non-finite value rejects the proposal.
pub fn pcn_step<R: Rng + ?Sized>(
    kappa: &DVector<f64>,
    phi: f64,
    prior: &GaussianPrior,
    beta: f64,
    potential: impl Fn(&DVector<f64>) -> f64,
    rng: &mut R,
) -> PcnStep {
    let m = prior.mean();
    let xi = prior.sample(rng) - m;
    let v = m + (kappa - m) * (1.0 - beta * beta).max(0.0).sqrt() + xi * beta;
    let phi_v = potential(&v);
    let u: f64 = rng.random();
    if phi_v.is_finite() && u.ln() < phi - phi_v {
        PcnStep { kappa: v, phi: phi_v, accepted: true }
    } else {
        PcnStep { kappa: kappa.clone(), phi, accepted: false }
    }
}

/// Leapfrog integration of `(x, p)` for `l` steps with inverse mass
/// `minv`. Returns the final state and log density with its gradient, or
/// `None` if the target failed or went non-finite on the way.
#[allow(clippy::type_complexity)]
pub fn leapfrog(
    x: &DVector<f64>,
    p: &DVector<f64>,
    grad: &DVector<f64>,
    eps: f64,
    l: usize,
    minv: &DVector<f64>,
    target: &impl Fn(&DVector<f64>) -> Result<(f64, DVector<f64>)>,
) -> Option<(DVector<f64>, DVector<f64>, f64, DVector<f64>)> {
    let mut x = x.clone();
    let mut p = p + grad * (0.5 * eps);
    let mut lp = 0.0;
    let mut g = grad.clone();
    for i in 0..l {
        x += p.component_mul(minv) * eps;
        let (v, gn) = target(&x).ok()?;
        if !v.is_finite() || gn.iter().any(|c| !c.is_finite()) {
            return None;
        }
        lp = v;
        g = gn;
        let w = if i + 1 == l { 0.5 } else { 1.0 };
        p += &g * (w * eps);
    }
    Some((x, p, lp, g))
}

fn kinetic(p: &DVector<f64>, minv: &DVector<f64>) -> f64 {
    0.5 * p.iter().zip(minv.iter()).map(|(a, m)| a * a * m).sum::<f64>()
}

#[derive(Debug, Clone)]
pub struct HmcStep {
    pub kappa: DVector<f64>,
    pub log_density: f64,
    pub grad: DVector<f64>,
    pub accepted: bool,
    pub divergent: bool,
    /// Acceptance probability `min(1, r)`, zero for divergent trajectories.
    pub accept_prob: f64,
}

/// One HMC transition targeting `exp(target)`, with momentum `N(0, M)` for
/// the diagonal mass `mass`.
#[allow(clippy::too_many_arguments)]
pub fn hmc_step<R: Rng + ?Sized>(
    kappa: &DVector<f64>,
    log_density: f64,
    grad: &DVector<f64>,
    target: &impl Fn(&DVector<f64>) -> Result<(f64, DVector<f64>)>,
    eps: f64,
    l: usize,
    mass: &DVector<f64>,
    rng: &mut R,
) -> HmcStep {
    let n = kappa.len();
    let p0 = DVector::from_iterator(n, standard_normal(n, rng).into_iter().zip(mass.iter()).map(|(z, m)| z * m.sqrt()));
    let minv = mass.map(|m| 1.0 / m);
    let u: f64 = rng.random();
    let reject = |divergent| HmcStep {
        kappa: kappa.clone(),
        log_density,
        grad: grad.clone(),
        accepted: false,
        divergent,
        accept_prob: 0.0,
    };
    let Some((x, p, lp, g)) = leapfrog(kappa, &p0, grad, eps, l, &minv, target) else {
        return reject(true);
    };
    let log_r = (lp - kinetic(&p, &minv)) - (log_density - kinetic(&p0, &minv));
    if !log_r.is_finite() {
        return reject(true);
    }
    let prob = log_r.min(0.0).exp();
    if u.ln() < log_r {
        HmcStep { kappa: x, log_density: lp, grad: g, accepted: true, divergent: false, accept_prob: prob }
    } else {
        HmcStep { accept_prob: prob, ..reject(false) }
    }
}

pub const MASS_FLOOR: f64 = 1e-8;

/// Diagonal mass from a pre-run: the inverse of each component's sample
/// variance, with variances floored at `MASS_FLOOR`.
pub fn adapt_mass(samples: &[Vec<f64>]) -> Result<Vec<f64>> {
    if samples.len() < 2 {
        return Err(Error::Config("mass adaptation needs at least two samples".into()));
    }
    let n = samples[0].len();
    let k = samples.len() as f64;
    let mut mean = vec![0.0; n];
    for s in samples {
        for (m, v) in mean.iter_mut().zip(s) {
            *m += v / k;
        }
    }
    let mut var = vec![0.0; n];
    for s in samples {
        for i in 0..n {
            var[i] += (s[i] - mean[i]).powi(2) / (k - 1.0);
        }
    }
    Ok(var.into_iter().map(|v| 1.0 / v.max(MASS_FLOOR)).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Ess {
    pub value: f64,
    /// Set when the chain is constant or too short for a reliable estimate.
    pub flagged: bool,
}

pub const ESS_FLOOR: f64 = 1.0;

/// Effective sample size from autocorrelations summed in adjacent pairs and
/// truncated at the first non-positive pair (initial positive sequence),
/// with pairs forced non-increasing.
pub fn ess(x: &[f64]) -> Ess {
    let n = x.len();
    if n < 4 {
        return Ess { value: ESS_FLOOR, flagged: true };
    }
    let nf = n as f64;
    let mean = x.iter().sum::<f64>() / nf;
    let c: Vec<f64> = x.iter().map(|v| v - mean).collect();
    let c0 = c.iter().map(|v| v * v).sum::<f64>() / nf;
    if !(c0 > 0.0) || !c0.is_finite() {
        return Ess { value: ESS_FLOOR, flagged: true };
    }
    let rho = |k: usize| c[..n - k].iter().zip(&c[k..]).map(|(a, b)| a * b).sum::<f64>() / nf / c0;
    let mut tau = -1.0;
    let mut prev = f64::INFINITY;
    let mut k = 0;
    while k + 1 < n {
        let pair = if k == 0 { 1.0 + rho(1) } else { rho(k) + rho(k + 1) };
        if pair <= 0.0 {
            break;
        }
        let pair = pair.min(prev);
        tau += 2.0 * pair;
        prev = pair;
        k += 2;
    }
    let value = (nf / tau.max(1e-12)).clamp(ESS_FLOOR, nf);
    Ess { value, flagged: n < 100 }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ChainSummary {
    pub method: String,
    pub seed: u64,
    pub steps: usize,
    pub retained: usize,
    pub acceptance: f64,
    /// Mean acceptance probability over HMC warm-up.
    pub warmup_acceptance: Option<f64>,
    pub ess_min: f64,
    pub ess_max: f64,
    pub ess: Vec<f64>,
    pub ess_flagged: bool,
    pub divergent: usize,
    pub beta: Option<f64>,
    pub step_size: Option<f64>,
    pub leapfrog: Option<usize>,
    pub mass: Option<Vec<f64>>,
    pub wall_seconds: f64,
}

impl ChainSummary {
    fn set_ess(&mut self, samples: &[Vec<f64>]) {
        let dim = samples.first().map_or(0, |s| s.len());
        let ess: Vec<Ess> = (0..dim)
            .map(|i| ess(&samples.iter().map(|s| s[i]).collect::<Vec<_>>()))
            .collect();
        self.ess = ess.iter().map(|e| e.value).collect();
        self.ess_min = self.ess.iter().cloned().fold(f64::INFINITY, f64::min);
        self.ess_max = self.ess.iter().cloned().fold(0.0, f64::max);
        self.ess_flagged = ess.iter().any(|e| e.flagged);
    }
}

/// Post-burn-in samples with run statistics. Acceptance counts the sampling
/// phase only.
#[derive(Debug, Clone)]
pub struct Chain {
    pub samples: Vec<Vec<f64>>,
    pub accepted: usize,
    pub proposals: usize,
    pub divergent: usize,
    pub seed: u64,
    pub summary: ChainSummary,
}

impl Chain {
    fn finish(
        method: &str,
        samples: Vec<Vec<f64>>,
        accepted: usize,
        divergent: usize,
        seed: u64,
        steps: usize,
        start: Instant,
    ) -> Chain {
        let proposals = samples.len();
        let mut summary = ChainSummary {
            method: method.into(),
            seed,
            steps,
            retained: samples.len(),
            acceptance: if proposals == 0 { 0.0 } else { accepted as f64 / proposals as f64 },
            warmup_acceptance: None,
            ess_min: 0.0,
            ess_max: 0.0,
            ess: vec![],
            ess_flagged: false,
            divergent,
            beta: None,
            step_size: None,
            leapfrog: None,
            mass: None,
            wall_seconds: start.elapsed().as_secs_f64(),
        };
        summary.set_ess(&samples);
        Chain { samples, accepted, proposals, divergent, seed, summary }
    }

    pub fn acceptance_rate(&self) -> f64 {
        self.summary.acceptance
    }

    pub fn ess_range(&self) -> (f64, f64) {
        (self.summary.ess_min, self.summary.ess_max)
    }

    pub fn dim(&self) -> usize {
        self.samples.first().map_or(0, |s| s.len())
    }

    /// Every `k`-th retained sample so that at most `s` remain.
    pub fn thinned(&self, s: usize) -> Vec<Vec<f64>> {
        let k = self.samples.len().div_ceil(s.max(1)).max(1);
        self.samples.iter().step_by(k).cloned().collect()
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        write_samples_csv(path, &self.samples)
    }

    pub fn write_summary(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(&self.summary)?)?;
        Ok(())
    }
}

/// One row per sample, columns `kappa_0, kappa_1, ...`.
pub fn write_samples_csv(path: &Path, samples: &[Vec<f64>]) -> Result<()> {
    let dim = samples.first().map_or(0, |s| s.len());
    let mut w = csv::Writer::from_path(path)?;
    w.write_record((0..dim).map(|i| format!("kappa_{i}")))?;
    for s in samples {
        w.write_record(s.iter().map(|v| format!("{v:?}")))?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_samples_csv(path: &Path) -> Result<Vec<Vec<f64>>> {
    let mut r = csv::Reader::from_path(path)?;
    let mut out = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec?;
        let row = rec
            .iter()
            .map(|v| v.trim().parse::<f64>().map_err(|e| Error::Parse { line: i + 2, msg: e.to_string() }))
            .collect::<Result<Vec<f64>>>()?;
        out.push(row);
    }
    Ok(out)
}

fn potential<L: LogLikelihood>(lik: &L, x: &DVector<f64>) -> f64 {
    match lik.value(x.as_slice()) {
        Ok(v) if v.is_finite() => -v,
        _ => f64::INFINITY,
    }
}

/// pCN chain started at the prior mean. During burn-in `log β` follows a
/// Robbins-Monro update towards the target acceptance rate.
pub fn run_pcn<L: LogLikelihood>(prior: &GaussianPrior, lik: &L, cfg: &PcnConfig, seed: u64) -> Result<Chain> {
    if !(cfg.beta > 0.0 && cfg.beta <= 1.0) {
        return Err(Error::Config(format!("pCN beta must lie in (0, 1], got {}", cfg.beta)));
    }
    if lik.dim() != prior.dim() {
        return Err(Error::dims("likelihood dimension", prior.dim(), lik.dim()));
    }
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let burn = (cfg.steps as f64 * cfg.burn_in).round() as usize;
    let mut kappa = prior.mean().clone();
    let mut phi = potential(lik, &kappa);
    if !phi.is_finite() {
        return Err(Error::NonFinite("pCN initial potential"));
    }
    let mut log_beta = cfg.beta.ln();
    let mut samples = Vec::with_capacity(cfg.steps - burn.min(cfg.steps));
    let mut accepted = 0;
    for t in 0..cfg.steps {
        let beta = log_beta.exp();
        let st = pcn_step(&kappa, phi, prior, beta, |v| potential(lik, v), &mut rng);
        kappa = st.kappa;
        phi = st.phi;
        if t < burn {
            if cfg.tune {
                let a = if st.accepted { 1.0 } else { 0.0 };
                log_beta = (log_beta + (a - cfg.target_accept) / ((t + 1) as f64).powf(0.6)).min(0.0);
            }
        } else {
            accepted += st.accepted as usize;
            samples.push(kappa.iter().cloned().collect());
        }
    }
    let mut chain = Chain::finish("pcn", samples, accepted, 0, seed, cfg.steps, start);
    chain.summary.beta = Some(log_beta.exp());
    Ok(chain)
}

/// Dual averaging of `log ε` towards a target acceptance probability.
#[derive(Debug, Clone)]
struct DualAveraging {
    mu: f64,
    target: f64,
    h_bar: f64,
    log_eps: f64,
    log_eps_bar: f64,
    t: f64,
}

impl DualAveraging {
    fn new(eps: f64, target: f64) -> Self {
        DualAveraging { mu: (10.0 * eps).ln(), target, h_bar: 0.0, log_eps: eps.ln(), log_eps_bar: eps.ln(), t: 0.0 }
    }

    fn update(&mut self, accept_prob: f64) -> f64 {
        const GAMMA: f64 = 0.05;
        const T0: f64 = 10.0;
        const KAPPA: f64 = 0.75;
        self.t += 1.0;
        let w = 1.0 / (self.t + T0);
        self.h_bar = (1.0 - w) * self.h_bar + w * (self.target - accept_prob);
        self.log_eps = self.mu - self.t.sqrt() / GAMMA * self.h_bar;
        let eta = self.t.powf(-KAPPA);
        self.log_eps_bar = eta * self.log_eps + (1.0 - eta) * self.log_eps_bar;
        self.log_eps.exp()
    }

    fn final_eps(&self) -> f64 {
        self.log_eps_bar.exp()
    }
}

/// Log posterior `log p(y | κ) + log p₀(κ)` and its gradient.
pub fn posterior_target<'a, L: LogLikelihood>(
    prior: &'a GaussianPrior,
    lik: &'a L,
) -> impl Fn(&DVector<f64>) -> Result<(f64, DVector<f64>)> + 'a {
    move |x| {
        let (ll, g) = lik.value_and_grad(x.as_slice())?;
        Ok((ll + prior.log_density(x), DVector::from_vec(g) + prior.grad_log_density(x)))
    }
}

/// HMC chain from `init`. Warm-up tunes ε by dual averaging; without a
/// configured mass, the first half of warm-up runs with the identity and the
/// mass is then set from those samples and ε re-tuned.
pub fn run_hmc(
    target: &impl Fn(&DVector<f64>) -> Result<(f64, DVector<f64>)>,
    init: DVector<f64>,
    cfg: &HmcConfig,
    seed: u64,
) -> Result<Chain> {
    let dim = init.len();
    cfg.validate(dim)?;
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let warm = (cfg.steps as f64 * cfg.warmup).round() as usize;
    let adapt_at = if cfg.mass.is_none() && warm / 2 >= 1000 { Some(warm / 2) } else { None };
    let mut mass = DVector::from_vec(cfg.mass.clone().unwrap_or_else(|| vec![1.0; dim]));
    let (mut lp, mut grad) = target(&init)?;
    if !lp.is_finite() {
        return Err(Error::NonFinite("HMC initial log density"));
    }
    let mut x = init;
    let mut eps = cfg.step_size;
    let mut da = DualAveraging::new(eps, cfg.target_accept);
    let mut pre = Vec::new();
    let mut samples = Vec::with_capacity(cfg.steps.saturating_sub(warm));
    let (mut accepted, mut divergent) = (0, 0);
    let mut warm_accept = 0.0;
    for t in 0..cfg.steps {
        if t == warm {
            eps = da.final_eps();
        }
        if Some(t) == adapt_at {
            mass = DVector::from_vec(adapt_mass(&pre)?);
            da = DualAveraging::new(eps, cfg.target_accept);
            pre.clear();
        }
        let st = hmc_step(&x, lp, &grad, target, eps, cfg.leapfrog, &mass, &mut rng);
        x = st.kappa;
        lp = st.log_density;
        grad = st.grad;
        if t < warm {
            warm_accept += st.accept_prob;
            eps = da.update(st.accept_prob);
            if adapt_at.is_some_and(|a| t < a) {
                pre.push(x.iter().cloned().collect());
            }
        } else {
            accepted += st.accepted as usize;
            divergent += st.divergent as usize;
            samples.push(x.iter().cloned().collect());
        }
    }
    let mut chain = Chain::finish("hmc", samples, accepted, divergent, seed, cfg.steps, start);
    chain.summary.warmup_acceptance = (warm > 0).then(|| warm_accept / warm as f64);
    chain.summary.step_size = Some(eps);
    chain.summary.leapfrog = Some(cfg.leapfrog);
    chain.summary.mass = Some(mass.iter().cloned().collect());
    Ok(chain)
}

/// HMC in prior-whitened coordinates `κ = m + L₀ z`, where the prior term
/// is `-|z|²/2`. Starts at the prior mean; samples, ESS and the adapted mass
/// are reported for `κ` (the mass stays the diagonal in `z`).
pub fn run_hmc_whitened<L: LogLikelihood>(prior: &GaussianPrior, lik: &L, cfg: &HmcConfig, seed: u64) -> Result<Chain> {
    let start = Instant::now();
    let l0 = prior.chol();
    let m = prior.mean();
    let target = |z: &DVector<f64>| -> Result<(f64, DVector<f64>)> {
        let k = m + l0 * z;
        let (ll, g) = lik.value_and_grad(k.as_slice())?;
        Ok((ll - 0.5 * z.norm_squared(), l0.tr_mul(&DVector::from_vec(g)) - z))
    };
    let mut chain = run_hmc(&target, DVector::zeros(prior.dim()), cfg, seed)?;
    for s in chain.samples.iter_mut() {
        let k = m + l0 * DVector::from_column_slice(s);
        s.copy_from_slice(k.as_slice());
    }
    chain.summary.set_ess(&chain.samples);
    chain.summary.wall_seconds = start.elapsed().as_secs_f64();
    Ok(chain)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::likelihood::Flat;
    use rand::Rng;
    use nalgebra::DMatrix;
    use proptest::prelude::*;

    fn mean_var(x: &[f64]) -> (f64, f64) {
        let n = x.len() as f64;
        let m = x.iter().sum::<f64>() / n;
        (m, x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1.0))
    }

    fn ar1(rho: f64, n: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut x = 0.0;
        let s = (1.0 - rho * rho).sqrt();
        (0..n)
            .map(|_| {
                let z: f64 = rng.sample(rand_distr::StandardNormal);
                x = rho * x + s * z;
                x
            })
            .collect()
    }

    fn std_normal_target(x: &DVector<f64>) -> Result<(f64, DVector<f64>)> {
        Ok((-0.5 * x.norm_squared(), -x))
    }

    #[test]
    fn pcn_beta_limits() {
        let prior = GaussianPrior::from_covariance(
            DVector::from_vec(vec![1.0, -1.0]),
            DMatrix::from_row_slice(2, 2, &[1.0, 0.3, 0.3, 0.5]),
            1.0,
        )
        .unwrap();
        let k = DVector::from_vec(vec![0.2, 0.7]);
        let mut a = ChaCha8Rng::seed_from_u64(3);
        let mut b = a.clone();
        let st = pcn_step(&k, 0.0, &prior, 1.0, |_| 0.0, &mut a);
        assert!(st.accepted);
        let fresh = prior.sample(&mut b);
        assert!((st.kappa - fresh).amax() < 1e-14);
        let st = pcn_step(&k, 5.0, &prior, 0.0, |_| 5.0, &mut a);
        assert!(st.accepted);
        assert!((st.kappa - &k).amax() < 1e-15);
    }

    #[test]
    fn rejected_steps_leave_state_identical() {
        let prior = GaussianPrior::iid(2, 1.0).unwrap();
        let k = DVector::from_vec(vec![0.1234567, -2.5]);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let st = pcn_step(&k, 1.0, &prior, 0.5, |_| f64::INFINITY, &mut rng);
        assert!(!st.accepted);
        assert_eq!(st.kappa, k);
        assert_eq!(st.phi, 1.0);
        let bad = |_: &DVector<f64>| -> Result<(f64, DVector<f64>)> { Err(Error::NonFinite("test")) };
        let g = DVector::from_vec(vec![0.3, 0.4]);
        let st = hmc_step(&k, -1.0, &g, &bad, 0.1, 10, &DVector::from_element(2, 1.0), &mut rng);
        assert!(!st.accepted && st.divergent);
        assert_eq!(st.kappa, k);
        assert_eq!(st.grad, g);
    }

    #[test]
    fn pcn_preserves_prior() {
        let cov = DMatrix::from_row_slice(2, 2, &[1.0, 0.6, 0.6, 2.0]);
        let prior = GaussianPrior::from_covariance(DVector::from_vec(vec![0.5, -1.0]), cov.clone(), 1.0).unwrap();
        let cfg = PcnConfig { beta: 0.3, steps: 100_000, burn_in: 0.0, tune: false, ..Default::default() };
        let chain = run_pcn(&prior, &Flat { dim: 2 }, &cfg, 11).unwrap();
        assert_eq!(chain.acceptance_rate(), 1.0);
        for i in 0..2 {
            let xs: Vec<f64> = chain.samples.iter().map(|s| s[i]).collect();
            let (m, v) = mean_var(&xs);
            let n_eff = ess(&xs).value;
            let se = (cov[(i, i)] / n_eff).sqrt();
            assert!((m - prior.mean()[i]).abs() < 3.0 * se, "mean {i}: {m}");
            // variance of a sample variance is about 2σ⁴/n
            let se_v = cov[(i, i)] * (2.0 / n_eff).sqrt();
            assert!((v - cov[(i, i)]).abs() < 3.0 * se_v, "var {i}: {v}");
        }
    }

    #[test]
    fn pcn_tunes_acceptance() {
        let prior = GaussianPrior::iid(4, 1.0).unwrap();
        let lik = crate::likelihood::DirectGaussian { y: vec![0.3; 4], var: vec![0.01; 4] };
        let cfg = PcnConfig { steps: 20_000, ..Default::default() };
        let chain = run_pcn(&prior, &lik, &cfg, 2).unwrap();
        assert!((chain.acceptance_rate() - 0.25).abs() < 0.06, "{}", chain.acceptance_rate());
    }

    #[test]
    fn leapfrog_is_reversible() {
        let prec = DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
        let target = |x: &DVector<f64>| -> Result<(f64, DVector<f64>)> {
            let g = -(&prec * x);
            Ok((0.5 * x.dot(&g), g))
        };
        let x0 = DVector::from_vec(vec![0.7, -0.3]);
        let p0 = DVector::from_vec(vec![0.2, 1.1]);
        let minv = DVector::from_vec(vec![1.0, 0.5]);
        let g0 = target(&x0).unwrap().1;
        let (x1, p1, _, g1) = leapfrog(&x0, &p0, &g0, 0.1, 25, &minv, &target).unwrap();
        let (x2, p2, _, _) = leapfrog(&x1, &-p1, &g1, 0.1, 25, &minv, &target).unwrap();
        assert!((x2 - &x0).amax() < 1e-10);
        assert!((-p2 - &p0).amax() < 1e-10);
    }

    #[test]
    fn zero_step_always_accepts() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = DVector::from_vec(vec![1.0, 2.0]);
        let (lp, g) = std_normal_target(&x).unwrap();
        for _ in 0..50 {
            let st = hmc_step(&x, lp, &g, &std_normal_target, 1e-300, 10, &DVector::from_element(2, 1.0), &mut rng);
            assert!(st.accepted);
            assert_eq!(st.accept_prob, 1.0);
        }
    }

    #[test]
    fn energy_error_is_second_order() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let minv = DVector::from_element(2, 1.0);
        let med = |eps: f64, rng: &mut ChaCha8Rng| {
            let mut errs: Vec<f64> = (0..400)
                .map(|_| {
                    let x = DVector::from_vec(standard_normal(2, rng));
                    let p = DVector::from_vec(standard_normal(2, rng));
                    let (lp, g) = std_normal_target(&x).unwrap();
                    let (_, p1, lp1, _) = leapfrog(&x, &p, &g, eps, 10, &minv, &std_normal_target).unwrap();
                    ((lp1 - kinetic(&p1, &minv)) - (lp - kinetic(&p, &minv))).abs()
                })
                .collect();
            errs.sort_by(f64::total_cmp);
            errs[200]
        };
        let a = med(0.2, &mut rng);
        let b = med(0.1, &mut rng);
        assert!((3.0..5.5).contains(&(a / b)), "{}", a / b);
    }

    #[test]
    fn hmc_samples_standard_normal() {
        let cfg = HmcConfig { mass: Some(vec![1.0]), steps: 100_000, warmup: 0.0, ..Default::default() };
        let chain = run_hmc(&std_normal_target, DVector::from_vec(vec![0.0]), &cfg, 5).unwrap();
        let xs: Vec<f64> = chain.samples.iter().map(|s| s[0]).collect();
        let (m, v) = mean_var(&xs);
        let se = (1.0 / ess(&xs).value).sqrt();
        assert!(m.abs() < 3.0 * se, "{m} {se}");
        assert!((v - 1.0).abs() < 0.05, "{v}");
    }

    #[test]
    fn hmc_warmup_tunes_acceptance_and_mass() {
        let scales = [3.0, 0.5, 1.0];
        let target = |x: &DVector<f64>| -> Result<(f64, DVector<f64>)> {
            let g = DVector::from_iterator(3, x.iter().zip(&scales).map(|(v, s)| -v / (s * s)));
            Ok((0.5 * x.dot(&g), g))
        };
        let cfg = HmcConfig { steps: 6000, ..Default::default() };
        let chain = run_hmc(&target, DVector::zeros(3), &cfg, 9).unwrap();
        // the averaged step size lands a little on the cautious side
        assert!((0.55..0.92).contains(&chain.acceptance_rate()), "{}", chain.acceptance_rate());
        let w = chain.summary.warmup_acceptance.unwrap();
        assert!((0.55..=0.75).contains(&w), "{w}");
        let m = chain.summary.mass.clone().unwrap();
        for (mi, s) in m.iter().zip(&scales) {
            assert!((mi * s * s - 1.0).abs() < 0.35, "{mi}");
        }
    }

    #[test]
    fn mass_from_prerun() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let pre: Vec<Vec<f64>> = (0..5000)
            .map(|_| {
                let z = standard_normal(2, &mut rng);
                vec![2.0 * z[0], z[1]]
            })
            .collect();
        let m = adapt_mass(&pre).unwrap();
        assert!((m[0] / 0.25 - 1.0).abs() < 0.1);
        assert!((m[1] - 1.0).abs() < 0.1);
        let scaled: Vec<Vec<f64>> = pre.iter().map(|s| s.iter().map(|v| 3.0 * v).collect()).collect();
        let ms = adapt_mass(&scaled).unwrap();
        assert!((ms[0] * 9.0 - m[0]).abs() < 1e-12 * m[0]);
        let flat = adapt_mass(&vec![vec![1.0, 2.0]; 1000]).unwrap();
        assert_eq!(flat, vec![1.0 / MASS_FLOOR; 2]);
    }

    #[test]
    fn ess_reference_chains() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let iid = standard_normal(10_000, &mut rng);
        let e = ess(&iid).value;
        assert!((8e3..=1.2e4).contains(&e), "{e}");
        let e = ess(&ar1(0.5, 100_000, 13)).value;
        assert!((e / (1e5 / 3.0) - 1.0).abs() < 0.1, "{e}");
        let c = ess(&[2.0; 500]);
        assert!(c.flagged && c.value == ESS_FLOOR);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn ess_bounded_and_affine_invariant(seed in 0u64..1000, rho in -0.9f64..0.95, a in 0.1f64..10.0, b in -5.0f64..5.0) {
            let x = ar1(rho, 500, seed);
            let e = ess(&x).value;
            prop_assert!(e > 0.0 && e <= 500.0);
            let y: Vec<f64> = x.iter().map(|v| a * v + b).collect();
            prop_assert!((ess(&y).value - e).abs() < 1e-8 * e);
        }
    }
}
