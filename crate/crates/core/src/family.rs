//! Gaussian trial families and the equal-weight Gaussian mixture.
//!
//! Every family keeps its parameters in one flat vector so the optimiser can
//! treat them uniformly. The first `n` entries are always the mean, in the
//! original element order. Diagonal factor entries are stored as logarithms.

use std::sync::OnceLock;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{sparsity_pattern, BandMask, BandProfile};
use crate::linalg::{cholesky_inverse, solve_lower, solve_lower_tr, LowerBand};
use crate::prior::{log_sum_exp, GaussianPrior, MixturePrior};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Log-density of a trial at a point with gradients in the point and in the
/// parameters.
#[derive(Debug, Clone)]
pub struct DensityGrad {
    pub value: f64,
    pub grad_x: DVector<f64>,
    pub grad_params: Vec<f64>,
}

/// Shared interface of the three Gaussian families.
pub trait GaussianTrial: Clone + Send + Sync {
    fn dim(&self) -> usize;
    fn params(&self) -> &[f64];
    fn set_params(&mut self, p: &[f64]) -> Result<()>;

    fn n_params(&self) -> usize {
        self.params().len()
    }

    fn mean(&self) -> DVector<f64> {
        DVector::from_column_slice(&self.params()[..self.dim()])
    }

    /// Reparametrised draw `t(φ, ε)`.
    fn sample_reparam(&self, eps: &[f64]) -> DVector<f64>;

    /// Adds `(∂t/∂φ)ᵀ g` to `out`, the parameter gradient of a scalar whose
    /// gradient at `t(φ, ε)` is `g`.
    fn pullback(&self, eps: &[f64], g: &DVector<f64>, out: &mut [f64]);

    /// [`pullback`](Self::pullback) summed over `(ε, g)` pairs.
    fn pullback_sum(&self, pairs: &[(Vec<f64>, DVector<f64>)], out: &mut [f64]) {
        for (e, g) in pairs {
            self.pullback(e, g, out);
        }
    }

    fn log_density(&self, x: &DVector<f64>) -> f64;

    fn log_density_grad(&self, x: &DVector<f64>) -> DensityGrad;

    /// `KL(q ‖ prior)` and its parameter gradient.
    fn kl_to_prior(&self, prior: &GaussianPrior) -> Result<(f64, Vec<f64>)>;

    fn covariance(&self) -> DMatrix<f64>;

    fn precision(&self) -> DMatrix<f64>;

    fn marginal_std(&self) -> DVector<f64> {
        self.covariance().diagonal().map(f64::sqrt)
    }

    fn log_det_cov(&self) -> f64;

    fn checkpoint(&self) -> Checkpoint;

    fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> DVector<f64> {
        let eps = standard_normal(self.dim(), rng);
        self.sample_reparam(&eps)
    }
}

pub fn standard_normal<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<f64> {
    (0..n).map(|_| rng.sample(rand_distr::StandardNormal)).collect()
}

/// Terms of the closed-form KL that do not depend on the family.
fn kl_common(mu: &DVector<f64>, prior: &GaussianPrior) -> Result<(f64, DVector<f64>)> {
    if mu.len() != prior.dim() {
        return Err(Error::dims("prior dimension", mu.len(), prior.dim()));
    }
    let d = mu - prior.mean();
    let pd = prior.precision() * &d;
    Ok((d.dot(&pd), pd))
}

/// Serialisable trial state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub variant: String,
    pub dim: usize,
    pub mean: Vec<f64>,
    /// Factor entries in storage order (log diagonal).
    pub factor: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub permutation: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bandwidth: Option<usize>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub components: Vec<Checkpoint>,
}

// ---------------------------------------------------------------- mean field

#[derive(Debug, Clone, PartialEq)]
pub struct MeanField {
    n: usize,
    params: Vec<f64>,
}

impl MeanField {
    /// `μ = 0`, `σ_i = scale`.
    pub fn new(n: usize, scale: f64) -> Self {
        let mut params = vec![0.0; 2 * n];
        params[n..].fill(scale.ln());
        MeanField { n, params }
    }

    pub fn from_parts(mean: &[f64], std: &[f64]) -> Self {
        let n = mean.len();
        let mut params = mean.to_vec();
        params.extend(std.iter().map(|s| s.ln()));
        MeanField { n, params }
    }

    pub fn std(&self) -> DVector<f64> {
        DVector::from_iterator(self.n, self.params[self.n..].iter().map(|d| d.exp()))
    }
}

impl GaussianTrial for MeanField {
    fn dim(&self) -> usize {
        self.n
    }

    fn params(&self) -> &[f64] {
        &self.params
    }

    fn set_params(&mut self, p: &[f64]) -> Result<()> {
        if p.len() != self.params.len() {
            return Err(Error::dims("mean-field parameters", self.params.len(), p.len()));
        }
        self.params.copy_from_slice(p);
        Ok(())
    }

    fn sample_reparam(&self, eps: &[f64]) -> DVector<f64> {
        let n = self.n;
        DVector::from_fn(n, |i, _| self.params[i] + self.params[n + i].exp() * eps[i])
    }

    fn pullback(&self, eps: &[f64], g: &DVector<f64>, out: &mut [f64]) {
        let n = self.n;
        for i in 0..n {
            out[i] += g[i];
            out[n + i] += g[i] * self.params[n + i].exp() * eps[i];
        }
    }

    fn log_density(&self, x: &DVector<f64>) -> f64 {
        self.log_density_grad(x).value
    }

    fn log_density_grad(&self, x: &DVector<f64>) -> DensityGrad {
        let n = self.n;
        let mut value = -0.5 * n as f64 * LN_2PI;
        let mut grad_x = DVector::zeros(n);
        let mut grad_params = vec![0.0; 2 * n];
        for i in 0..n {
            let d = self.params[n + i];
            let s2 = (2.0 * d).exp();
            let r = x[i] - self.params[i];
            value -= d + 0.5 * r * r / s2;
            grad_x[i] = -r / s2;
            grad_params[i] = r / s2;
            grad_params[n + i] = -1.0 + r * r / s2;
        }
        DensityGrad { value, grad_x, grad_params }
    }

    fn kl_to_prior(&self, prior: &GaussianPrior) -> Result<(f64, Vec<f64>)> {
        let n = self.n;
        let (quad, pd) = kl_common(&self.mean(), prior)?;
        let p = prior.precision();
        let mut trace = 0.0;
        let mut grad = vec![0.0; 2 * n];
        for i in 0..n {
            let s2 = (2.0 * self.params[n + i]).exp();
            trace += p[(i, i)] * s2;
            grad[i] = pd[i];
            grad[n + i] = p[(i, i)] * s2 - 1.0;
        }
        let log_det_q = 2.0 * self.params[n..].iter().sum::<f64>();
        let kl = 0.5 * (trace + quad - n as f64 + prior.log_det() - log_det_q);
        Ok((kl, grad))
    }

    fn covariance(&self) -> DMatrix<f64> {
        DMatrix::from_diagonal(&self.std().map(|s| s * s))
    }

    fn precision(&self) -> DMatrix<f64> {
        DMatrix::from_diagonal(&self.std().map(|s| 1.0 / (s * s)))
    }

    fn marginal_std(&self) -> DVector<f64> {
        self.std()
    }

    fn log_det_cov(&self) -> f64 {
        2.0 * self.params[self.n..].iter().sum::<f64>()
    }

    fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            variant: "mfvb".into(),
            dim: self.n,
            mean: self.params[..self.n].to_vec(),
            factor: self.params[self.n..].to_vec(),
            permutation: None,
            bandwidth: None,
            components: vec![],
        }
    }
}

// ------------------------------------------------------------- full Cholesky

#[derive(Debug, Clone, PartialEq)]
pub struct FullCholesky {
    n: usize,
    params: Vec<f64>,
    l: DMatrix<f64>,
}

#[inline]
fn packed(i: usize, j: usize) -> usize {
    i * (i + 1) / 2 + j
}

impl FullCholesky {
    /// `μ = 0`, `L = scale · I`.
    pub fn new(n: usize, scale: f64) -> Self {
        Self::from_parts(&vec![0.0; n], &(DMatrix::identity(n, n) * scale)).expect("positive diagonal")
    }

    pub fn from_parts(mean: &[f64], l: &DMatrix<f64>) -> Result<Self> {
        let n = mean.len();
        if l.nrows() != n || l.ncols() != n {
            return Err(Error::dims("Cholesky factor", n, l.nrows()));
        }
        let mut params = mean.to_vec();
        params.resize(n + n * (n + 1) / 2, 0.0);
        for i in 0..n {
            for j in 0..=i {
                params[n + packed(i, j)] = if i == j {
                    if !(l[(i, i)] > 0.0) {
                        return Err(Error::Config("Cholesky diagonal must be positive".into()));
                    }
                    l[(i, i)].ln()
                } else {
                    l[(i, j)]
                };
            }
        }
        let mut q = FullCholesky { n, params, l: DMatrix::zeros(n, n) };
        q.rebuild();
        Ok(q)
    }

    fn rebuild(&mut self) {
        let n = self.n;
        for i in 0..n {
            for j in 0..=i {
                let v = self.params[n + packed(i, j)];
                self.l[(i, j)] = if i == j { v.exp() } else { v };
            }
        }
    }

    pub fn factor(&self) -> &DMatrix<f64> {
        &self.l
    }

    /// Converts `∂/∂L_ij` (lower entries) into the stored parametrisation.
    fn factor_grad_into(&self, d: &DMatrix<f64>, out: &mut [f64]) {
        let n = self.n;
        for i in 0..n {
            for j in 0..=i {
                let chain = if i == j { self.l[(i, i)] } else { 1.0 };
                out[n + packed(i, j)] += d[(i, j)] * chain;
            }
        }
    }
}

impl GaussianTrial for FullCholesky {
    fn dim(&self) -> usize {
        self.n
    }

    fn params(&self) -> &[f64] {
        &self.params
    }

    fn set_params(&mut self, p: &[f64]) -> Result<()> {
        if p.len() != self.params.len() {
            return Err(Error::dims("full-Cholesky parameters", self.params.len(), p.len()));
        }
        self.params.copy_from_slice(p);
        self.rebuild();
        Ok(())
    }

    fn sample_reparam(&self, eps: &[f64]) -> DVector<f64> {
        self.mean() + &self.l * DVector::from_column_slice(eps)
    }

    fn pullback(&self, eps: &[f64], g: &DVector<f64>, out: &mut [f64]) {
        let n = self.n;
        for i in 0..n {
            out[i] += g[i];
            for j in 0..i {
                out[n + packed(i, j)] += g[i] * eps[j];
            }
            out[n + packed(i, i)] += g[i] * eps[i] * self.l[(i, i)];
        }
    }

    fn log_density(&self, x: &DVector<f64>) -> f64 {
        let z = solve_lower(&self.l, &(x - self.mean()));
        -0.5 * (self.n as f64 * LN_2PI + z.norm_squared()) - 0.5 * self.log_det_cov()
    }

    fn log_density_grad(&self, x: &DVector<f64>) -> DensityGrad {
        let n = self.n;
        let z = solve_lower(&self.l, &(x - self.mean()));
        let w = solve_lower_tr(&self.l, &z);
        let value = -0.5 * (n as f64 * LN_2PI + z.norm_squared()) - 0.5 * self.log_det_cov();
        let mut grad_params = vec![0.0; self.params.len()];
        for i in 0..n {
            grad_params[i] = w[i];
        }
        let mut d = &w * z.transpose();
        for i in 0..n {
            d[(i, i)] -= 1.0 / self.l[(i, i)];
        }
        self.factor_grad_into(&d, &mut grad_params);
        DensityGrad { value, grad_x: -w, grad_params }
    }

    fn kl_to_prior(&self, prior: &GaussianPrior) -> Result<(f64, Vec<f64>)> {
        let n = self.n;
        let (quad, pd) = kl_common(&self.mean(), prior)?;
        let pl = prior.precision() * &self.l;
        let trace = pl.component_mul(&self.l).sum();
        let kl = 0.5 * (trace + quad - n as f64 + prior.log_det() - self.log_det_cov());
        let mut grad = vec![0.0; self.params.len()];
        grad[..n].copy_from_slice(pd.as_slice());
        let mut d = pl;
        for i in 0..n {
            d[(i, i)] -= 1.0 / self.l[(i, i)];
        }
        self.factor_grad_into(&d, &mut grad);
        Ok((kl, grad))
    }

    fn covariance(&self) -> DMatrix<f64> {
        &self.l * self.l.transpose()
    }

    fn precision(&self) -> DMatrix<f64> {
        cholesky_inverse(&self.l)
    }

    fn marginal_std(&self) -> DVector<f64> {
        DVector::from_fn(self.n, |i, _| self.l.row(i).norm())
    }

    fn log_det_cov(&self) -> f64 {
        2.0 * (0..self.n).map(|i| self.params[self.n + packed(i, i)]).sum::<f64>()
    }

    fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            variant: "fcvb".into(),
            dim: self.n,
            mean: self.params[..self.n].to_vec(),
            factor: self.params[self.n..].to_vec(),
            permutation: None,
            bandwidth: None,
            components: vec![],
        }
    }
}

// ------------------------------------------------ whitened full Cholesky

/// The full-Cholesky family in prior-whitened coordinates: `μ = m + L₀ μ_w`
/// and `L = L₀ L_w`, where `N(m, L₀ L₀ᵀ)` is the prior. The set of
/// distributions is unchanged; the optimiser sees `(μ_w, L_w)`.
#[derive(Debug, Clone)]
pub struct WhitenedCholesky {
    white: FullCholesky,
    // natural-coordinate trial, built on first use after a parameter change
    inner: OnceLock<FullCholesky>,
    m: DVector<f64>,
    l0: DMatrix<f64>,
}

impl PartialEq for WhitenedCholesky {
    fn eq(&self, o: &Self) -> bool {
        self.white == o.white && self.m == o.m && self.l0 == o.l0
    }
}

impl WhitenedCholesky {
    /// `μ = m`, `L = scale · L₀`.
    pub fn new(prior: &GaussianPrior, scale: f64) -> Self {
        let white = FullCholesky::new(prior.dim(), scale);
        Self::assemble(white, prior)
    }

    pub fn from_trial(prior: &GaussianPrior, q: &FullCholesky) -> Result<Self> {
        if q.dim() != prior.dim() {
            return Err(Error::dims("whitened trial", prior.dim(), q.dim()));
        }
        let l0 = prior.chol();
        let mu = solve_lower(l0, &(q.mean() - prior.mean()));
        let lw = l0.solve_lower_triangular(q.factor()).ok_or(Error::Cholesky { jitter: prior.jitter() })?;
        let white = FullCholesky::from_parts(mu.as_slice(), &lw.lower_triangle())?;
        Ok(Self::assemble(white, prior))
    }

    fn assemble(white: FullCholesky, prior: &GaussianPrior) -> Self {
        WhitenedCholesky { white, inner: OnceLock::new(), m: prior.mean().clone(), l0: prior.chol().clone() }
    }

    fn build_inner(&self) -> FullCholesky {
        let n = self.m.len();
        let mu = &self.m + &self.l0 * self.white.mean();
        let lw = self.white.factor();
        let mut l = DMatrix::zeros(n, n);
        for j in 0..n {
            for k in j..n {
                let w = lw[(k, j)];
                if w != 0.0 {
                    for i in k..n {
                        l[(i, j)] += self.l0[(i, k)] * w;
                    }
                }
            }
        }
        FullCholesky::from_parts(mu.as_slice(), &l).expect("product of positive-diagonal factors")
    }

    /// The trial in natural coordinates.
    pub fn trial(&self) -> &FullCholesky {
        self.inner.get_or_init(|| self.build_inner())
    }

    pub fn into_trial(self) -> FullCholesky {
        self.trial().clone()
    }
}

impl GaussianTrial for WhitenedCholesky {
    fn dim(&self) -> usize {
        self.m.len()
    }

    fn params(&self) -> &[f64] {
        self.white.params()
    }

    fn set_params(&mut self, p: &[f64]) -> Result<()> {
        self.white.set_params(p)?;
        self.inner = OnceLock::new();
        Ok(())
    }

    fn mean(&self) -> DVector<f64> {
        &self.m + &self.l0 * self.white.mean()
    }

    fn sample_reparam(&self, eps: &[f64]) -> DVector<f64> {
        &self.m + &self.l0 * self.white.sample_reparam(eps)
    }

    fn pullback(&self, eps: &[f64], g: &DVector<f64>, out: &mut [f64]) {
        self.white.pullback(eps, &self.l0.tr_mul(g), out);
    }

    fn log_density(&self, x: &DVector<f64>) -> f64 {
        self.trial().log_density(x)
    }

    fn log_density_grad(&self, x: &DVector<f64>) -> DensityGrad {
        let mut d = self.trial().log_density_grad(x);
        let z = solve_lower(&self.l0, &(x - &self.m));
        d.grad_params = self.white.log_density_grad(&z).grad_params;
        d
    }

    fn kl_to_prior(&self, prior: &GaussianPrior) -> Result<(f64, Vec<f64>)> {
        if prior.mean() != &self.m || prior.chol() != &self.l0 {
            return Err(Error::DataMismatch("whitened trial used with a different prior".into()));
        }
        let n = self.m.len();
        let mu = self.white.mean();
        let l = self.white.factor();
        let log_diag: f64 = (0..n).map(|i| l[(i, i)].ln()).sum();
        let kl = 0.5 * (l.norm_squared() + mu.norm_squared() - n as f64) - log_diag;
        let mut grad = mu.as_slice().to_vec();
        for i in 0..n {
            for j in 0..i {
                grad.push(l[(i, j)]);
            }
            grad.push(l[(i, i)] * l[(i, i)] - 1.0);
        }
        Ok((kl, grad))
    }

    fn covariance(&self) -> DMatrix<f64> {
        self.trial().covariance()
    }

    fn precision(&self) -> DMatrix<f64> {
        self.trial().precision()
    }

    fn marginal_std(&self) -> DVector<f64> {
        self.trial().marginal_std()
    }

    fn log_det_cov(&self) -> f64 {
        self.trial().log_det_cov()
    }

    fn checkpoint(&self) -> Checkpoint {
        self.trial().checkpoint()
    }
}

// -------------------------------------------------------- banded precision

/// `κ = μ + Pᵀ L_Q⁻ᵀ ε` where `P` reorders elements by the band profile and
/// `L_Q` is lower banded, so the precision `Pᵀ L_Q L_Qᵀ P` is banded in the
/// permuted numbering.
#[derive(Debug, Clone, PartialEq)]
pub struct BandedPrecision {
    n: usize,
    profile: BandProfile,
    mask: BandMask,
    entries: Vec<(usize, usize)>,
    params: Vec<f64>,
    l: LowerBand,
}

impl BandedPrecision {
    /// `μ = 0`, `L_Q = (1 / scale) I`, so the marginal std is `scale`.
    pub fn new(profile: BandProfile, scale: f64) -> Self {
        let n = profile.n();
        let mask = sparsity_pattern(&profile);
        let l = LowerBand::identity(n, mask.bandwidth);
        let entries = mask.entries();
        let mut out = BandedPrecision { n, profile, mask, entries, params: vec![], l };
        let mut factor = out.l.clone();
        for i in 0..n {
            *factor.get_mut(i, i) = 1.0 / scale;
        }
        out.params = out.pack(&vec![0.0; n], &factor);
        out.rebuild();
        out
    }

    /// From a mean in element order and a factor in permuted order.
    pub fn from_parts(profile: BandProfile, mean: &[f64], factor: &LowerBand) -> Result<Self> {
        let n = profile.n();
        let mask = sparsity_pattern(&profile);
        if mean.len() != n || factor.n() != n {
            return Err(Error::dims("banded factor", n, factor.n()));
        }
        let l = LowerBand::zeros(n, mask.bandwidth);
        let entries = mask.entries();
        let mut out = BandedPrecision { n, profile, mask, entries, params: vec![], l };
        out.params = out.pack(mean, factor);
        out.rebuild();
        Ok(out)
    }

    fn pack(&self, mean: &[f64], factor: &LowerBand) -> Vec<f64> {
        let mut p = mean.to_vec();
        for &(i, j) in &self.entries {
            let v = factor.get(i, j);
            p.push(if i == j { v.ln() } else { v });
        }
        p
    }

    fn rebuild(&mut self) {
        let n = self.n;
        for (k, &(i, j)) in self.entries.iter().enumerate() {
            let v = self.params[n + k];
            *self.l.get_mut(i, j) = if i == j { v.exp() } else { v };
        }
    }

    pub fn profile(&self) -> &BandProfile {
        &self.profile
    }

    pub fn mask(&self) -> &BandMask {
        &self.mask
    }

    pub fn factor(&self) -> &LowerBand {
        &self.l
    }

    fn to_perm(&self, v: &DVector<f64>) -> Vec<f64> {
        self.profile.permutation.iter().map(|&e| v[e]).collect()
    }

    fn from_perm(&self, v: &[f64]) -> DVector<f64> {
        let mut out = DVector::zeros(self.n);
        for (p, &e) in self.profile.permutation.iter().enumerate() {
            out[e] = v[p];
        }
        out
    }

    /// Writes `∂/∂L_ij` over the mask into the stored parametrisation.
    fn factor_grad_into(&self, d: impl Fn(usize, usize) -> f64, out: &mut [f64]) {
        let n = self.n;
        for (k, &(i, j)) in self.entries.iter().enumerate() {
            let chain = if i == j { self.l.get(i, i) } else { 1.0 };
            out[n + k] += d(i, j) * chain;
        }
    }

    fn permuted_precision(&self, prior: &GaussianPrior) -> DMatrix<f64> {
        let perm = &self.profile.permutation;
        DMatrix::from_fn(self.n, self.n, |a, b| prior.precision()[(perm[a], perm[b])])
    }

    fn kl_permuted(&self, prior: &GaussianPrior, pp: &DMatrix<f64>) -> Result<(f64, Vec<f64>)> {
        let n = self.n;
        let (quad, pd) = kl_common(&self.mean(), prior)?;
        let x = self.dense_inverse_factor();
        let sigma = x.transpose() * &x;
        let trace = sigma.component_mul(pp).sum();
        let kl = 0.5 * (trace + quad - n as f64 + prior.log_det() - self.log_det_cov());
        let mut grad = vec![0.0; self.params.len()];
        grad[..n].copy_from_slice(pd.as_slice());
        // ∂tr/∂L = -2 Σ P Lᵀ⁻¹, halved by the KL prefactor
        let a = &sigma * pp;
        let l = &self.l;
        self.factor_grad_into(
            |i, j| {
                let mut s = 0.0;
                for k in 0..=j {
                    s += a[(i, k)] * x[(j, k)];
                }
                -s + if i == j { 1.0 / l.get(i, i) } else { 0.0 }
            },
            &mut grad,
        );
        Ok((kl, grad))
    }

    /// Dense `L_Q⁻¹` in permuted order.
    fn dense_inverse_factor(&self) -> DMatrix<f64> {
        let n = self.n;
        let mut x = DMatrix::zeros(n, n);
        let mut col = vec![0.0; n];
        for c in 0..n {
            col.fill(0.0);
            col[c] = 1.0;
            self.l.solve_lower_in_place(&mut col);
            for r in 0..n {
                x[(r, c)] = col[r];
            }
        }
        x
    }
}

impl GaussianTrial for BandedPrecision {
    fn dim(&self) -> usize {
        self.n
    }

    fn params(&self) -> &[f64] {
        &self.params
    }

    fn set_params(&mut self, p: &[f64]) -> Result<()> {
        if p.len() != self.params.len() {
            return Err(Error::dims("banded-precision parameters", self.params.len(), p.len()));
        }
        self.params.copy_from_slice(p);
        self.rebuild();
        Ok(())
    }

    fn sample_reparam(&self, eps: &[f64]) -> DVector<f64> {
        let mut z = eps.to_vec();
        self.l.solve_upper_in_place(&mut z);
        self.mean() + self.from_perm(&z)
    }

    fn pullback(&self, eps: &[f64], g: &DVector<f64>, out: &mut [f64]) {
        let n = self.n;
        for i in 0..n {
            out[i] += g[i];
        }
        let mut z = eps.to_vec();
        self.l.solve_upper_in_place(&mut z);
        let mut w = self.to_perm(g);
        self.l.solve_lower_in_place(&mut w);
        self.factor_grad_into(|i, j| -z[i] * w[j], out);
    }

    fn log_density(&self, x: &DVector<f64>) -> f64 {
        let y = self.to_perm(&(x - self.mean()));
        let v = self.l.tr_mul_vec(&y);
        -0.5 * (self.n as f64 * LN_2PI + v.iter().map(|a| a * a).sum::<f64>()) + self.l.log_diag_sum()
    }

    fn log_density_grad(&self, x: &DVector<f64>) -> DensityGrad {
        let n = self.n;
        let y = self.to_perm(&(x - self.mean()));
        let v = self.l.tr_mul_vec(&y);
        let value = -0.5 * (n as f64 * LN_2PI + v.iter().map(|a| a * a).sum::<f64>()) + self.l.log_diag_sum();
        let qy = self.from_perm(&self.l.mul_vec(&v));
        let mut grad_params = vec![0.0; self.params.len()];
        for i in 0..n {
            grad_params[i] = qy[i];
        }
        let l = &self.l;
        self.factor_grad_into(|i, j| -y[i] * v[j] + if i == j { 1.0 / l.get(i, i) } else { 0.0 }, &mut grad_params);
        DensityGrad { value, grad_x: -qy, grad_params }
    }

    fn kl_to_prior(&self, prior: &GaussianPrior) -> Result<(f64, Vec<f64>)> {
        self.kl_permuted(prior, &self.permuted_precision(prior))
    }

    fn covariance(&self) -> DMatrix<f64> {
        let x = self.dense_inverse_factor();
        let s = x.transpose() * x;
        let pos = self.profile.positions();
        DMatrix::from_fn(self.n, self.n, |a, b| s[(pos[a], pos[b])])
    }

    fn precision(&self) -> DMatrix<f64> {
        let l = self.l.to_dense();
        let q = &l * l.transpose();
        let pos = self.profile.positions();
        DMatrix::from_fn(self.n, self.n, |a, b| q[(pos[a], pos[b])])
    }

    fn log_det_cov(&self) -> f64 {
        -2.0 * self.l.log_diag_sum()
    }

    fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            variant: "pmvb".into(),
            dim: self.n,
            mean: self.params[..self.n].to_vec(),
            factor: self.params[self.n..].to_vec(),
            permutation: Some(self.profile.permutation.clone()),
            bandwidth: Some(self.mask.bandwidth),
            components: vec![],
        }
    }
}

// ------------------------------------------- preconditioned banded precision

/// The banded-precision family in preconditioned optimiser coordinates.
/// The mean is prior-whitened, `μ = m + L₀ μ_w`. Column `j` of `L_Q`, on
/// its band rows `s = j..=j+b`, is `V_j θ_j` with `V_j` the Cholesky factor
/// of the local prior precision `K_ss⁻¹`; `θ_j[0]` is stored as a log. At
/// `θ_j = e₁` the factor is the banded approximation of the prior
/// precision that minimises `KL(prior ‖ q)`. The distributions are exactly
/// those of [`BandedPrecision`] with the same profile.
#[derive(Debug, Clone, PartialEq)]
pub struct PreconditionedBanded {
    inner: BandedPrecision,
    params: Vec<f64>,
    m: DVector<f64>,
    l0: DMatrix<f64>,
    // local factors per column, and the position of entry (i, j) in the
    // parameter vector
    v: Vec<DMatrix<f64>>,
    entries: Vec<(usize, usize)>,
    pp: DMatrix<f64>,
}

impl PreconditionedBanded {
    /// `μ = m`, `θ_j = e₁ / scale`.
    pub fn new(profile: BandProfile, prior: &GaussianPrior, scale: f64) -> Result<Self> {
        let n = profile.n();
        if n != prior.dim() {
            return Err(Error::dims("banded trial", prior.dim(), n));
        }
        let b = sparsity_pattern(&profile).bandwidth;
        let mut factor = LowerBand::zeros(n, b);
        let v = Self::local_factors(&profile, prior, b)?;
        for (j, vj) in v.iter().enumerate() {
            for r in 0..vj.nrows() {
                *factor.get_mut(j + r, j) = vj[(r, 0)] / scale;
            }
        }
        let inner = BandedPrecision::from_parts(profile, prior.mean().as_slice(), &factor)?;
        Self::build(prior, inner, v)
    }

    pub fn from_trial(prior: &GaussianPrior, q: &BandedPrecision) -> Result<Self> {
        if q.dim() != prior.dim() {
            return Err(Error::dims("banded trial", prior.dim(), q.dim()));
        }
        let v = Self::local_factors(q.profile(), prior, q.mask().bandwidth)?;
        Self::build(prior, q.clone(), v)
    }

    fn local_factors(profile: &BandProfile, prior: &GaussianPrior, b: usize) -> Result<Vec<DMatrix<f64>>> {
        let n = profile.n();
        let perm = &profile.permutation;
        (0..n)
            .map(|j| {
                let rows: Vec<usize> = (j..n.min(j + b + 1)).collect();
                let k = DMatrix::from_fn(rows.len(), rows.len(), |a, c| prior.cov()[(perm[rows[a]], perm[rows[c]])]);
                let err = Error::Cholesky { jitter: prior.jitter() };
                let kinv = nalgebra::Cholesky::new(k).ok_or(err)?.inverse();
                let kinv = (&kinv + kinv.transpose()) * 0.5;
                Ok(nalgebra::Cholesky::new(kinv).ok_or(Error::Cholesky { jitter: prior.jitter() })?.unpack())
            })
            .collect()
    }

    fn build(prior: &GaussianPrior, inner: BandedPrecision, v: Vec<DMatrix<f64>>) -> Result<Self> {
        let n = inner.dim();
        let l0 = prior.chol().clone();
        let entries = inner.mask().entries();
        let mut params = solve_lower(&l0, &(inner.mean() - prior.mean())).as_slice().to_vec();
        let thetas: Vec<DVector<f64>> = v
            .iter()
            .enumerate()
            .map(|(j, vj)| {
                let col = DVector::from_fn(vj.nrows(), |r, _| inner.factor().get(j + r, j));
                solve_lower(vj, &col)
            })
            .collect();
        for &(i, j) in &entries {
            let t = thetas[j][i - j];
            if i == j {
                if !(t > 0.0) {
                    return Err(Error::Config("banded factor diagonal must be positive".into()));
                }
                params.push(t.ln());
            } else {
                params.push(t);
            }
        }
        debug_assert_eq!(params.len(), n + entries.len());
        let pp = inner.permuted_precision(prior);
        Ok(PreconditionedBanded { inner, params, m: prior.mean().clone(), l0, v, entries, pp })
    }

    pub fn trial(&self) -> &BandedPrecision {
        &self.inner
    }

    pub fn into_trial(self) -> BandedPrecision {
        self.inner
    }

    fn thetas(&self, p: &[f64]) -> Vec<DVector<f64>> {
        let n = self.inner.n;
        let mut th: Vec<DVector<f64>> = self.v.iter().map(|vj| DVector::zeros(vj.nrows())).collect();
        for (k, &(i, j)) in self.entries.iter().enumerate() {
            th[j][i - j] = if i == j { p[n + k].exp() } else { p[n + k] };
        }
        th
    }

    /// Gradient in the inner parametrisation mapped to ours.
    fn chain(&self, g: &[f64]) -> Vec<f64> {
        let n = self.inner.n;
        let mut out = self.l0.tr_mul(&DVector::from_column_slice(&g[..n])).as_slice().to_vec();
        let l = self.inner.factor();
        let mut dl: Vec<DVector<f64>> = self.v.iter().map(|vj| DVector::zeros(vj.nrows())).collect();
        for (k, &(i, j)) in self.entries.iter().enumerate() {
            dl[j][i - j] = if i == j { g[n + k] / l.get(i, i) } else { g[n + k] };
        }
        let dth: Vec<DVector<f64>> = self.v.iter().zip(&dl).map(|(vj, d)| vj.tr_mul(d)).collect();
        let th = self.thetas(&self.params);
        for &(i, j) in &self.entries {
            let d = dth[j][i - j];
            out.push(if i == j { d * th[j][0] } else { d });
        }
        out
    }
}

impl GaussianTrial for PreconditionedBanded {
    fn dim(&self) -> usize {
        self.inner.n
    }

    fn params(&self) -> &[f64] {
        &self.params
    }

    fn set_params(&mut self, p: &[f64]) -> Result<()> {
        if p.len() != self.params.len() {
            return Err(Error::dims("banded-precision parameters", self.params.len(), p.len()));
        }
        let n = self.inner.n;
        let th = self.thetas(p);
        let cols: Vec<DVector<f64>> = self.v.iter().zip(&th).map(|(vj, t)| vj * t).collect();
        let mut inner_p = (&self.m + &self.l0 * DVector::from_column_slice(&p[..n])).as_slice().to_vec();
        for &(i, j) in &self.entries {
            let v = cols[j][i - j];
            if i == j && !(v > 0.0 && v.is_finite()) {
                return Err(Error::NonFinite("banded factor diagonal"));
            }
            inner_p.push(if i == j { v.ln() } else { v });
        }
        self.inner.set_params(&inner_p)?;
        self.params.copy_from_slice(p);
        Ok(())
    }

    fn mean(&self) -> DVector<f64> {
        self.inner.mean()
    }

    fn sample_reparam(&self, eps: &[f64]) -> DVector<f64> {
        self.inner.sample_reparam(eps)
    }

    fn pullback(&self, eps: &[f64], g: &DVector<f64>, out: &mut [f64]) {
        let mut tmp = vec![0.0; self.params.len()];
        self.inner.pullback(eps, g, &mut tmp);
        for (o, v) in out.iter_mut().zip(self.chain(&tmp)) {
            *o += v;
        }
    }

    // the chain rule is linear, so it is applied once to the summed inner gradient
    fn pullback_sum(&self, pairs: &[(Vec<f64>, DVector<f64>)], out: &mut [f64]) {
        let mut tmp = vec![0.0; self.params.len()];
        for (e, g) in pairs {
            self.inner.pullback(e, g, &mut tmp);
        }
        for (o, v) in out.iter_mut().zip(self.chain(&tmp)) {
            *o += v;
        }
    }

    fn log_density(&self, x: &DVector<f64>) -> f64 {
        self.inner.log_density(x)
    }

    fn log_density_grad(&self, x: &DVector<f64>) -> DensityGrad {
        let mut d = self.inner.log_density_grad(x);
        d.grad_params = self.chain(&d.grad_params);
        d
    }

    fn kl_to_prior(&self, prior: &GaussianPrior) -> Result<(f64, Vec<f64>)> {
        if prior.mean() != &self.m || prior.chol() != &self.l0 {
            return Err(Error::DataMismatch("preconditioned trial used with a different prior".into()));
        }
        let (kl, g) = self.inner.kl_permuted(prior, &self.pp)?;
        Ok((kl, self.chain(&g)))
    }

    fn covariance(&self) -> DMatrix<f64> {
        self.inner.covariance()
    }

    fn precision(&self) -> DMatrix<f64> {
        self.inner.precision()
    }

    fn log_det_cov(&self) -> f64 {
        self.inner.log_det_cov()
    }

    fn checkpoint(&self) -> Checkpoint {
        self.inner.checkpoint()
    }
}

// ------------------------------------------------------------------ mixture

/// Equal-weight mixture of full-Cholesky Gaussians. Parameters are the
/// concatenation of the component parameters.
#[derive(Debug, Clone)]
pub struct GaussianMixtureTrial {
    components: Vec<FullCholesky>,
    params: Vec<f64>,
}

impl GaussianMixtureTrial {
    pub fn new(components: Vec<FullCholesky>) -> Result<Self> {
        if components.is_empty() {
            return Err(Error::Config("mixture trial needs at least one component".into()));
        }
        let d = components[0].dim();
        if let Some(c) = components.iter().find(|c| c.dim() != d) {
            return Err(Error::dims("mixture component", d, c.dim()));
        }
        let params = components.iter().flat_map(|c| c.params().to_vec()).collect();
        Ok(GaussianMixtureTrial { components, params })
    }

    /// Component `k` starts at a draw from prior component `k mod K₀` with
    /// factor `scale · I`.
    pub fn from_prior(prior: &MixturePrior, k: usize, scale: f64, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let comps = (0..k)
            .map(|c| {
                let pc = &prior.components()[c % prior.components().len()];
                let m = pc.sample(&mut rng);
                FullCholesky::from_parts(m.as_slice(), &(DMatrix::identity(pc.dim(), pc.dim()) * scale))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(comps)
    }

    pub fn dim(&self) -> usize {
        self.components[0].dim()
    }

    pub fn num_components(&self) -> usize {
        self.components.len()
    }

    pub fn components(&self) -> &[FullCholesky] {
        &self.components
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    fn stride(&self) -> usize {
        self.components[0].n_params()
    }

    pub fn set_params(&mut self, p: &[f64]) -> Result<()> {
        if p.len() != self.params.len() {
            return Err(Error::dims("mixture parameters", self.params.len(), p.len()));
        }
        self.params.copy_from_slice(p);
        let s = self.stride();
        for (k, c) in self.components.iter_mut().enumerate() {
            c.set_params(&p[k * s..(k + 1) * s])?;
        }
        Ok(())
    }

    /// Component index for a uniform draw `u ∈ [0, 1)`.
    pub fn select(&self, u: f64) -> usize {
        ((u * self.components.len() as f64) as usize).min(self.components.len() - 1)
    }

    pub fn sample_reparam(&self, k: usize, eps: &[f64]) -> DVector<f64> {
        self.components[k].sample_reparam(eps)
    }

    pub fn pullback(&self, k: usize, eps: &[f64], g: &DVector<f64>, out: &mut [f64]) {
        let s = self.stride();
        self.components[k].pullback(eps, g, &mut out[k * s..(k + 1) * s]);
    }

    pub fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> DVector<f64> {
        let k = self.select(rng.random());
        let eps = standard_normal(self.dim(), rng);
        self.sample_reparam(k, &eps)
    }

    pub fn log_density(&self, x: &DVector<f64>) -> f64 {
        let lw = -(self.components.len() as f64).ln();
        let t: Vec<f64> = self.components.iter().map(|c| lw + c.log_density(x)).collect();
        log_sum_exp(&t)
    }

    pub fn log_density_grad(&self, x: &DVector<f64>) -> DensityGrad {
        let lw = -(self.components.len() as f64).ln();
        let parts: Vec<DensityGrad> = self.components.iter().map(|c| c.log_density_grad(x)).collect();
        let t: Vec<f64> = parts.iter().map(|p| lw + p.value).collect();
        let value = log_sum_exp(&t);
        let s = self.stride();
        let mut grad_x = DVector::zeros(self.dim());
        let mut grad_params = vec![0.0; self.params.len()];
        for (k, p) in parts.iter().enumerate() {
            let r = (t[k] - value).exp();
            grad_x += &p.grad_x * r;
            for (o, g) in grad_params[k * s..(k + 1) * s].iter_mut().zip(&p.grad_params) {
                *o = r * g;
            }
        }
        DensityGrad { value, grad_x, grad_params }
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            variant: "mixture".into(),
            dim: self.dim(),
            mean: vec![],
            factor: vec![],
            permutation: None,
            bandwidth: None,
            components: self.components.iter().map(|c| c.checkpoint()).collect(),
        }
    }
}

/// Monte Carlo `KL(q ‖ p₀)` for a mixture trial and a mixture prior, with the
/// sample standard error.
pub fn kl_mc_estimate(q: &GaussianMixtureTrial, prior: &MixturePrior, n_samples: usize, seed: u64) -> Result<(f64, f64)> {
    if n_samples == 0 {
        return Err(Error::Config("KL estimate needs at least one sample".into()));
    }
    if q.dim() != prior.dim() {
        return Err(Error::dims("prior dimension", q.dim(), prior.dim()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let vals: Vec<f64> = (0..n_samples)
        .map(|_| {
            let x = q.draw(&mut rng);
            q.log_density(&x) - prior.log_density(&x)
        })
        .collect();
    Ok(mean_and_stderr(&vals))
}

/// Monte Carlo `KL(q ‖ prior)` for a Gaussian trial, used to cross-check the
/// closed form.
pub fn kl_mc_gaussian<T: GaussianTrial>(q: &T, prior: &GaussianPrior, n_samples: usize, seed: u64) -> (f64, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let vals: Vec<f64> = (0..n_samples)
        .map(|_| {
            let x = q.draw(&mut rng);
            q.log_density(&x) - prior.log_density(&x)
        })
        .collect();
    mean_and_stderr(&vals)
}

fn mean_and_stderr(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (m, 0.0);
    }
    let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
    (m, (var / n).sqrt())
}

/// Restores a Gaussian trial of any variant from its checkpoint.
pub fn restore(cp: &Checkpoint) -> Result<Trial> {
    let mut params = cp.mean.clone();
    params.extend_from_slice(&cp.factor);
    let n = cp.dim;
    match cp.variant.as_str() {
        "mfvb" => {
            let mut q = MeanField::new(n, 1.0);
            q.set_params(&params)?;
            Ok(Trial::MeanField(q))
        }
        "fcvb" => {
            let mut q = FullCholesky::new(n, 1.0);
            q.set_params(&params)?;
            Ok(Trial::FullCholesky(q))
        }
        "pmvb" => {
            let perm = cp.permutation.clone().ok_or_else(|| Error::Config("checkpoint lacks a permutation".into()))?;
            let bw = cp.bandwidth.ok_or_else(|| Error::Config("checkpoint lacks a bandwidth".into()))?;
            let mut q = BandedPrecision::new(BandProfile { permutation: perm, bandwidth: bw }, 1.0);
            q.set_params(&params)?;
            Ok(Trial::BandedPrecision(q))
        }
        other => Err(Error::Config(format!("unknown trial variant {other:?}"))),
    }
}

/// Any of the three Gaussian families.
#[derive(Debug, Clone)]
pub enum Trial {
    MeanField(MeanField),
    FullCholesky(FullCholesky),
    BandedPrecision(BandedPrecision),
}

macro_rules! dispatch {
    ($self:expr, $q:ident => $e:expr) => {
        match $self {
            Trial::MeanField($q) => $e,
            Trial::FullCholesky($q) => $e,
            Trial::BandedPrecision($q) => $e,
        }
    };
}

impl GaussianTrial for Trial {
    fn dim(&self) -> usize {
        dispatch!(self, q => q.dim())
    }
    fn params(&self) -> &[f64] {
        dispatch!(self, q => q.params())
    }
    fn set_params(&mut self, p: &[f64]) -> Result<()> {
        dispatch!(self, q => q.set_params(p))
    }
    fn sample_reparam(&self, eps: &[f64]) -> DVector<f64> {
        dispatch!(self, q => q.sample_reparam(eps))
    }
    fn pullback(&self, eps: &[f64], g: &DVector<f64>, out: &mut [f64]) {
        dispatch!(self, q => q.pullback(eps, g, out))
    }
    fn log_density(&self, x: &DVector<f64>) -> f64 {
        dispatch!(self, q => q.log_density(x))
    }
    fn log_density_grad(&self, x: &DVector<f64>) -> DensityGrad {
        dispatch!(self, q => q.log_density_grad(x))
    }
    fn kl_to_prior(&self, prior: &GaussianPrior) -> Result<(f64, Vec<f64>)> {
        dispatch!(self, q => q.kl_to_prior(prior))
    }
    fn covariance(&self) -> DMatrix<f64> {
        dispatch!(self, q => q.covariance())
    }
    fn precision(&self) -> DMatrix<f64> {
        dispatch!(self, q => q.precision())
    }
    fn marginal_std(&self) -> DVector<f64> {
        dispatch!(self, q => q.marginal_std())
    }
    fn log_det_cov(&self) -> f64 {
        dispatch!(self, q => q.log_det_cov())
    }
    fn checkpoint(&self) -> Checkpoint {
        dispatch!(self, q => q.checkpoint())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::reverse_cuthill_mckee;
    use crate::graph::AdjacencyGraph;
    use crate::prior::SeKernel;
    use proptest::prelude::*;
    use rand::Rng;

    fn profile(n: usize, bw: usize) -> BandProfile {
        // a shuffled path so the permutation is not the identity
        let order: Vec<usize> = (0..n).map(|i| (i * 3 + 1) % n).collect();
        let mut edges = Vec::new();
        for a in 0..n {
            for d in 1..=bw {
                if a + d < n {
                    edges.push((order[a], order[a + d]));
                }
            }
        }
        reverse_cuthill_mckee(&AdjacencyGraph::from_edges(n, &edges))
    }

    fn random_params<T: GaussianTrial>(q: &mut T, seed: u64, spread: f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p: Vec<f64> = q.params().iter().map(|_| spread * (rng.random::<f64>() - 0.5)).collect();
        q.set_params(&p).unwrap();
    }

    fn prior(n: usize) -> GaussianPrior {
        let c: Vec<[f64; 2]> = (0..n).map(|i| [i as f64 / n as f64, 0.0]).collect();
        GaussianPrior::se(SeKernel::new(1.2, 0.3).unwrap(), &c).unwrap()
    }

    fn trials(n: usize, seed: u64) -> Vec<Trial> {
        let mut out = vec![
            Trial::MeanField(MeanField::new(n, 1.0)),
            Trial::FullCholesky(FullCholesky::new(n, 1.0)),
            Trial::BandedPrecision(BandedPrecision::new(profile(n, 2), 1.0)),
        ];
        for (k, q) in out.iter_mut().enumerate() {
            random_params(q, seed + k as u64, 1.0);
        }
        out
    }

    fn fd_grad(f: impl Fn(&[f64]) -> f64, p: &[f64]) -> Vec<f64> {
        let h = 1e-6;
        (0..p.len())
            .map(|i| {
                let mut a = p.to_vec();
                let mut b = p.to_vec();
                a[i] += h;
                b[i] -= h;
                (f(&a) - f(&b)) / (2.0 * h)
            })
            .collect()
    }

    fn rel_err(a: &[f64], b: &[f64]) -> f64 {
        let scale = b.iter().map(|v| v.abs()).fold(1.0, f64::max);
        a.iter().zip(b).map(|(x, y)| (x - y).abs() / scale).fold(0.0, f64::max)
    }

    #[test]
    fn zero_noise_gives_mean_and_identity_factors() {
        let n = 5;
        let eps = vec![0.0; n];
        for q in trials(n, 1) {
            assert!((q.sample_reparam(&eps) - q.mean()).amax() < 1e-15);
        }
        let e: Vec<f64> = (0..n).map(|i| i as f64 - 2.0).collect();
        let mu = [0.5, -0.1, 0.2, 0.0, 0.3];
        let fc = FullCholesky::from_parts(&mu, &DMatrix::identity(n, n)).unwrap();
        let pm = BandedPrecision::from_parts(profile(n, 1), &mu, &LowerBand::identity(n, 1)).unwrap();
        for i in 0..n {
            assert!((fc.sample_reparam(&e)[i] - mu[i] - e[i]).abs() < 1e-15);
        }
        // with L_Q = I the draw is μ + Pᵀε
        let s = pm.sample_reparam(&e);
        let perm = &pm.profile().permutation;
        for p in 0..n {
            assert!((s[perm[p]] - mu[perm[p]] - e[p]).abs() < 1e-15);
        }
    }

    #[test]
    fn standard_normal_density_at_origin() {
        let n = 4;
        let zero = DVector::zeros(n);
        let expect = -0.5 * n as f64 * LN_2PI;
        assert!((MeanField::new(n, 1.0).log_density(&zero) - expect).abs() < 1e-14);
        assert!((FullCholesky::new(n, 1.0).log_density(&zero) - expect).abs() < 1e-14);
        assert!((BandedPrecision::new(profile(n, 1), 1.0).log_density(&zero) - expect).abs() < 1e-14);
    }

    #[test]
    fn banded_density_matches_dense_inverse() {
        let n = 8;
        let mut q = BandedPrecision::new(profile(n, 3), 1.0);
        random_params(&mut q, 9, 1.5);
        let cov = q.precision().try_inverse().unwrap();
        assert!((&cov - q.covariance()).amax() < 1e-8 * cov.amax());
        let x = DVector::from_fn(n, |i, _| (i as f64 * 0.7).sin());
        let d = &x - q.mean();
        let direct = -0.5 * (n as f64 * LN_2PI + cov.determinant().ln() + (d.transpose() * cov.try_inverse().unwrap() * &d)[(0, 0)]);
        assert!((q.log_density(&x) - direct).abs() < 1e-8);
        // precision bandwidth in permuted order
        let l = q.factor().to_dense();
        let qp = &l * l.transpose();
        for i in 0..n {
            for j in 0..n {
                if i.abs_diff(j) > q.mask().bandwidth {
                    assert_eq!(qp[(i, j)], 0.0);
                }
            }
        }
    }

    #[test]
    fn whitened_trial_matches_natural_coordinates() {
        let n = 6;
        let pr = prior(n);
        let mut w = WhitenedCholesky::new(&pr, 0.5);
        random_params(&mut w, 21, 0.8);
        let q = w.trial().clone();
        let (kw, _) = w.kl_to_prior(&pr).unwrap();
        let (kq, _) = q.kl_to_prior(&pr).unwrap();
        assert!((kw - kq).abs() < 1e-6 * kq.abs().max(1.0));
        let back = WhitenedCholesky::from_trial(&pr, &q).unwrap();
        assert!(rel_err(back.params(), w.params()) < 1e-8);
        let p0 = w.params().to_vec();
        let kl = |p: &[f64]| {
            let mut t = w.clone();
            t.set_params(p).unwrap();
            t.kl_to_prior(&pr).unwrap().0
        };
        assert!(rel_err(&w.kl_to_prior(&pr).unwrap().1, &fd_grad(kl, &p0)) < 1e-6);
        let eps: Vec<f64> = (0..n).map(|i| (i as f64 * 1.3).cos()).collect();
        let g = DVector::from_fn(n, |i, _| (i as f64 * 0.4).sin());
        let mut out = vec![0.0; p0.len()];
        w.pullback(&eps, &g, &mut out);
        let lin = |p: &[f64]| {
            let mut t = w.clone();
            t.set_params(p).unwrap();
            t.sample_reparam(&eps).dot(&g)
        };
        assert!(rel_err(&out, &fd_grad(lin, &p0)) < 1e-6);
        let x = DVector::from_fn(n, |i, _| 0.3 * i as f64 - 0.5);
        assert!((w.log_density(&x) - q.log_density(&x)).abs() < 1e-10);
        let ld = |p: &[f64]| {
            let mut t = w.clone();
            t.set_params(p).unwrap();
            t.log_density(&x)
        };
        assert!(rel_err(&w.log_density_grad(&x).grad_params, &fd_grad(ld, &p0)) < 1e-6);
        assert!(w.kl_to_prior(&prior(n + 1)).is_err());
    }

    #[test]
    fn preconditioned_banded_gradients() {
        let n = 7;
        let pr = prior(n);
        let mut w = PreconditionedBanded::new(profile(n, 2), &pr, 0.5).unwrap();
        let p0: Vec<f64> = w.params().iter().enumerate().map(|(k, v)| v + 0.1 * (k as f64).sin()).collect();
        w.set_params(&p0).unwrap();
        let back = PreconditionedBanded::from_trial(&pr, w.trial()).unwrap();
        assert!(rel_err(back.params(), w.params()) < 1e-8);
        let kl = |p: &[f64]| {
            let mut t = w.clone();
            t.set_params(p).unwrap();
            t.kl_to_prior(&pr).unwrap().0
        };
        let got = w.kl_to_prior(&pr).unwrap().1;
        assert!(rel_err(&got, &fd_grad(kl, &p0)) < 1e-5, "{}", rel_err(&got, &fd_grad(kl, &p0)));
        let eps: Vec<f64> = (0..n).map(|i| (i as f64 * 1.3).cos()).collect();
        let g = DVector::from_fn(n, |i, _| (i as f64 * 0.4).sin());
        let mut out = vec![0.0; p0.len()];
        w.pullback(&eps, &g, &mut out);
        let lin = |p: &[f64]| {
            let mut t = w.clone();
            t.set_params(p).unwrap();
            t.sample_reparam(&eps).dot(&g)
        };
        assert!(rel_err(&out, &fd_grad(lin, &p0)) < 1e-6);
        let x = DVector::from_fn(n, |i, _| 0.3 * i as f64 - 0.5);
        let ld = |p: &[f64]| {
            let mut t = w.clone();
            t.set_params(p).unwrap();
            t.log_density(&x)
        };
        assert!(rel_err(&w.log_density_grad(&x).grad_params, &fd_grad(ld, &p0)) < 1e-6);
    }

    #[test]
    fn closed_form_kl_examples() {
        let n = 6;
        let p = prior(n);
        let fc = FullCholesky::from_parts(&vec![0.0; n], p.chol()).unwrap();
        assert!(fc.kl_to_prior(&p).unwrap().0.abs() < 1e-9);

        let id = GaussianPrior::iid(3, 1.0).unwrap();
        let mu = [0.3, -1.0, 2.0];
        let q = MeanField::from_parts(&mu, &[1.0; 3]);
        let half = 0.5 * mu.iter().map(|m| m * m).sum::<f64>();
        assert!((q.kl_to_prior(&id).unwrap().0 - half).abs() < 1e-7);

        let one = GaussianPrior::iid(1, 1.0).unwrap();
        let q = MeanField::from_parts(&[0.0], &[2f64.sqrt()]);
        assert!((q.kl_to_prior(&one).unwrap().0 - 0.153_426_409_720_027_3).abs() < 1e-7);
    }

    #[test]
    fn kl_gradients_match_finite_differences() {
        let n = 6;
        let p = prior(n);
        for q in trials(n, 4) {
            let (_, g) = q.kl_to_prior(&p).unwrap();
            let fd = fd_grad(
                |x| {
                    let mut r = q.clone();
                    r.set_params(x).unwrap();
                    r.kl_to_prior(&p).unwrap().0
                },
                q.params(),
            );
            assert!(rel_err(&g, &fd) < 1e-6, "{:?}", q.checkpoint().variant);
        }
    }

    #[test]
    fn density_and_pullback_gradients_match_finite_differences() {
        let n = 5;
        let x = DVector::from_fn(n, |i, _| 0.3 * i as f64 - 0.4);
        let eps: Vec<f64> = (0..n).map(|i| (i as f64 * 1.3).cos()).collect();
        let a = DVector::from_fn(n, |i, _| 1.0 + 0.5 * i as f64);
        for q in trials(n, 7) {
            let dg = q.log_density_grad(&x);
            assert!((dg.value - q.log_density(&x)).abs() < 1e-12);
            let fd = fd_grad(
                |p| {
                    let mut r = q.clone();
                    r.set_params(p).unwrap();
                    r.log_density(&x)
                },
                q.params(),
            );
            assert!(rel_err(&dg.grad_params, &fd) < 1e-6);
            let fdx = fd_grad(|v| q.log_density(&DVector::from_column_slice(v)), x.as_slice());
            assert!(rel_err(dg.grad_x.as_slice(), &fdx) < 1e-6);

            // f(κ) = Σ a_i κ_i² through the reparametrisation
            let f = |k: &DVector<f64>| k.iter().zip(a.iter()).map(|(v, w)| w * v * v).sum::<f64>();
            let k = q.sample_reparam(&eps);
            let g = DVector::from_fn(n, |i, _| 2.0 * a[i] * k[i]);
            let mut out = vec![0.0; q.n_params()];
            q.pullback(&eps, &g, &mut out);
            let fd = fd_grad(
                |p| {
                    let mut r = q.clone();
                    r.set_params(p).unwrap();
                    f(&r.sample_reparam(&eps))
                },
                q.params(),
            );
            assert!(rel_err(&out, &fd) < 1e-6);
        }
    }

    #[test]
    fn sample_moments_match_implied() {
        let n = 4;
        for q in trials(n, 12) {
            let mut rng = ChaCha8Rng::seed_from_u64(3);
            let s = 100_000;
            let mut m = DVector::zeros(n);
            let mut c = DMatrix::zeros(n, n);
            for _ in 0..s {
                let x = q.draw(&mut rng) - q.mean();
                m += &x;
                c += &x * x.transpose();
            }
            m /= s as f64;
            c /= s as f64;
            let cov = q.covariance();
            for i in 0..n {
                assert!(m[i].abs() < 4.0 * (cov[(i, i)] / s as f64).sqrt());
            }
            assert!((&c - &cov).norm() / cov.norm() < 0.03);
        }
    }

    #[test]
    fn family_containment() {
        let n = 5;
        let mut mf = MeanField::new(n, 1.0);
        random_params(&mut mf, 2, 1.0);
        let mu: Vec<f64> = mf.mean().iter().copied().collect();
        let std = mf.std();
        let fc = FullCholesky::from_parts(&mu, &DMatrix::from_diagonal(&std)).unwrap();
        let mut band = LowerBand::zeros(n, n - 1);
        let prof = BandProfile { permutation: (0..n).collect(), bandwidth: n - 1 };
        for i in 0..n {
            *band.get_mut(i, i) = 1.0 / std[i];
        }
        let pm = BandedPrecision::from_parts(prof, &mu, &band).unwrap();
        assert_eq!(pm.n_params(), fc.n_params());
        let x = DVector::from_fn(n, |i, _| 0.1 * i as f64);
        assert!((mf.log_density(&x) - fc.log_density(&x)).abs() < 1e-12);
        assert!((mf.log_density(&x) - pm.log_density(&x)).abs() < 1e-12);
        let p = prior(n);
        let (a, b, c) = (mf.kl_to_prior(&p).unwrap().0, fc.kl_to_prior(&p).unwrap().0, pm.kl_to_prior(&p).unwrap().0);
        assert!((a - b).abs() < 1e-9 && (a - c).abs() < 1e-9);
    }

    #[test]
    fn pmvb_checkpoint_for_bandwidth_ten() {
        let prof = BandProfile { permutation: (0..32).collect(), bandwidth: 10 };
        let q = BandedPrecision::new(prof, 0.1);
        let cp = q.checkpoint();
        assert_eq!(cp.factor.len(), 297);
        assert_eq!(cp.bandwidth, Some(10));
        let back = restore(&serde_json::from_str(&serde_json::to_string(&cp).unwrap()).unwrap()).unwrap();
        assert_eq!(back.params(), q.params());
        assert!((q.marginal_std()[3] - 0.1).abs() < 1e-14);
    }

    #[test]
    fn mixture_kl_estimates() {
        let prior = MixturePrior::multimodal();
        let q = GaussianMixtureTrial::new(
            prior.components().iter().map(|c| FullCholesky::from_parts(c.mean().as_slice(), c.chol()).unwrap()).collect(),
        )
        .unwrap();
        let (kl, se) = kl_mc_estimate(&q, &prior, 10_000, 5).unwrap();
        assert!(kl.abs() <= 3.0 * se.max(1e-12), "{kl} {se}");

        let g = GaussianPrior::iid(2, 1.0).unwrap();
        let single_prior = MixturePrior::new(vec![1.0], vec![g.clone()]).unwrap();
        let fc = FullCholesky::from_parts(&[0.4, -0.3], &DMatrix::from_row_slice(2, 2, &[0.8, 0.0, 0.3, 0.6])).unwrap();
        let exact = fc.kl_to_prior(&g).unwrap().0;
        let mix = GaussianMixtureTrial::new(vec![fc]).unwrap();
        let (kl, se) = kl_mc_estimate(&mix, &single_prior, 20_000, 8).unwrap();
        assert!((kl - exact).abs() <= 3.0 * se);
        assert_eq!(kl_mc_estimate(&mix, &single_prior, 1, 3).unwrap().0, kl_mc_estimate(&mix, &single_prior, 1, 3).unwrap().0);
    }

    #[test]
    fn mixture_density_gradient() {
        let prior = MixturePrior::multimodal();
        let mut q = GaussianMixtureTrial::from_prior(&prior, 2, 0.5, 1).unwrap();
        let p: Vec<f64> = q.params().iter().enumerate().map(|(i, v)| v + 0.05 * (i as f64).sin()).collect();
        q.set_params(&p).unwrap();
        let x = DVector::from_vec(vec![-1.0, -6.0]);
        let dg = q.log_density_grad(&x);
        let fd = fd_grad(
            |p| {
                let mut r = q.clone();
                r.set_params(p).unwrap();
                r.log_density(&x)
            },
            q.params(),
        );
        assert!(rel_err(&dg.grad_params, &fd) < 1e-6);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn kl_is_non_negative(seed in 0u64..10_000, spread in 0.1f64..3.0) {
            let p = prior(5);
            for mut q in trials(5, seed) {
                random_params(&mut q, seed, spread);
                let (kl, _) = q.kl_to_prior(&p).unwrap();
                prop_assert!(kl >= -1e-10);
            }
        }
    }
}
