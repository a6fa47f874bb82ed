//! Experiment configuration.
//!
//! A config is one flat TOML (or JSON) table. Keys not given fall back to
//! the defaults of the chosen `kind`, unknown keys are rejected.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Kind {
    Poisson1d,
    Poisson2d,
    Benchmark,
    Multimodal,
}

impl Kind {
    pub fn name(self) -> &'static str {
        match self {
            Kind::Poisson1d => "poisson1d",
            Kind::Poisson2d => "poisson2d",
            Kind::Benchmark => "benchmark",
            Kind::Multimodal => "multimodal",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Mfvb,
    Fcvb,
    Pmvb,
    Pcn,
    Hmc,
    Mixture,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Mfvb => "mfvb",
            Method::Fcvb => "fcvb",
            Method::Pmvb => "pmvb",
            Method::Pcn => "pcn",
            Method::Hmc => "hmc",
            Method::Mixture => "mixture",
        }
    }

    pub fn is_variational(self) -> bool {
        !matches!(self, Method::Pcn | Method::Hmc)
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        serde_json::from_value(Value::String(s.to_ascii_lowercase()))
            .map_err(|_| Error::Config(format!("unknown method '{s}' (mfvb, fcvb, pmvb, pcn, hmc, mixture)")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PriorKernel {
    Se,
    Iid,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub kind: Kind,

    /// Mesh file in the plain-text format; overrides the generator.
    pub mesh_file: Option<PathBuf>,
    /// 1D element count.
    pub n_elements: usize,
    /// 2D grid cells per side.
    pub nx: usize,
    pub ny: usize,
    /// `[centre_x, centre_y, radius]` of the hole cut from the 2D grid.
    pub hole: Option<[f64; 3]>,
    /// Benchmark coefficient grid per side.
    pub kappa_cells: usize,
    pub source: f64,

    pub prior_kernel: PriorKernel,
    pub prior_length_scale: f64,
    pub prior_sigma: f64,

    /// Directory written by `generate` or `benchmark-import`. Without it
    /// data are synthesised next to the run.
    pub data_dir: Option<PathBuf>,
    pub true_length_scale: f64,
    /// Multimodal ground truth `(kappa, ln u_R)`.
    pub true_params: Option<Vec<f64>>,
    pub sigma_y: f64,
    pub n_y: usize,
    pub data_seed: u64,
    /// Benchmark sensor grid per side.
    pub sensor_grid: usize,

    pub method: Method,
    pub n_svi: usize,
    pub bandwidth: Option<usize>,
    pub order: usize,
    pub init_scale: f64,
    pub components: usize,
    pub learning_rate: Option<f64>,
    pub decay_interval: Option<u64>,
    pub decay_rate: Option<f64>,
    pub max_steps: Option<u64>,
    pub warmup: Option<u64>,
    pub patience: Option<u64>,
    pub tau_rel: Option<f64>,

    pub mcmc_steps: usize,
    pub burn_in: f64,
    pub pcn_beta: f64,
    pub hmc_step_size: f64,
    pub hmc_leapfrog: usize,

    pub n_samples: usize,
    pub seed: u64,
    pub out: PathBuf,
    pub threads: usize,
}

impl ExperimentConfig {
    pub fn defaults(kind: Kind) -> Self {
        let base = ExperimentConfig {
            kind,
            mesh_file: None,
            n_elements: 32,
            nx: 10,
            ny: 10,
            hole: None,
            kappa_cells: 8,
            source: 1.0,
            prior_kernel: PriorKernel::Se,
            prior_length_scale: 0.2,
            prior_sigma: 1.0,
            data_dir: None,
            true_length_scale: 0.2,
            true_params: None,
            sigma_y: 0.01,
            n_y: 5,
            data_seed: 1,
            sensor_grid: 13,
            method: Method::Fcvb,
            n_svi: 3,
            bandwidth: None,
            order: 1,
            init_scale: 0.1,
            components: 2,
            learning_rate: None,
            decay_interval: None,
            decay_rate: None,
            max_steps: None,
            warmup: None,
            patience: None,
            tau_rel: None,
            mcmc_steps: 20_000,
            burn_in: 0.5,
            pcn_beta: 0.2,
            hmc_step_size: 0.1,
            hmc_leapfrog: 10,
            n_samples: crate::metrics::DEFAULT_SAMPLES,
            seed: 0,
            out: PathBuf::from("runs/out"),
            threads: 1,
        };
        match kind {
            Kind::Poisson1d => base,
            Kind::Poisson2d => ExperimentConfig {
                hole: Some([0.5, 0.5, 0.15]),
                sigma_y: 0.001,
                n_svi: 5,
                mcmc_steps: 50_000,
                ..base
            },
            Kind::Benchmark => ExperimentConfig {
                nx: 32,
                ny: 32,
                source: 10.0,
                prior_kernel: PriorKernel::Iid,
                sigma_y: 0.05,
                n_y: 1,
                n_svi: 5,
                mcmc_steps: 50_000,
                ..base
            },
            Kind::Multimodal => ExperimentConfig {
                true_params: Some(vec![0.5f64.ln(), 0.25f64.ln()]),
                sigma_y: 0.05,
                n_y: 2,
                method: Method::Mixture,
                ..base
            },
        }
    }

    /// Parses TOML, or JSON when the text starts with `{`.
    pub fn parse(text: &str) -> Result<Self> {
        let user: Value = if text.trim_start().starts_with('{') {
            serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?
        } else {
            toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?
        };
        let Value::Object(user) = user else {
            return Err(Error::Config("config must be a table".into()));
        };
        let kind = match user.get("kind") {
            Some(k) => serde_json::from_value(k.clone())
                .map_err(|_| Error::Config(format!("unknown kind {k} (poisson1d, poisson2d, benchmark, multimodal)")))?,
            None => Kind::Poisson1d,
        };
        let mut merged = serde_json::to_value(Self::defaults(kind))?;
        let table = merged.as_object_mut().expect("struct serialises to an object");
        for (k, v) in user {
            table.insert(k, v);
        }
        let cfg: ExperimentConfig = serde_json::from_value(merged).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if let Some(p) = &self.mesh_file {
            if !p.is_file() {
                return bad(format!("mesh file {} does not exist", p.display()));
            }
        }
        if let Some(p) = &self.data_dir {
            if !p.join("manifest.json").is_file() {
                return bad(format!("data directory {} has no manifest.json", p.display()));
            }
        }
        if self.n_elements == 0 || self.nx == 0 || self.ny == 0 {
            return bad("mesh sizes must be positive".into());
        }
        if self.kind == Kind::Benchmark && (!self.nx.is_multiple_of(self.kappa_cells) || !self.ny.is_multiple_of(self.kappa_cells)) {
            return bad(format!("a {}x{} grid cannot carry {} coefficient cells per side", self.nx, self.ny, self.kappa_cells));
        }
        if self.kind == Kind::Multimodal && !self.n_elements.is_multiple_of(2) {
            return bad("the multimodal problem needs an even element count".into());
        }
        for (name, v) in [
            ("prior_length_scale", self.prior_length_scale),
            ("prior_sigma", self.prior_sigma),
            ("true_length_scale", self.true_length_scale),
            ("sigma_y", self.sigma_y),
            ("init_scale", self.init_scale),
            ("hmc_step_size", self.hmc_step_size),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return bad(format!("{name} must be positive, got {v}"));
            }
        }
        if !self.source.is_finite() {
            return bad("source must be finite".into());
        }
        if !(0.0..1.0).contains(&self.burn_in) {
            return bad(format!("burn_in must lie in [0, 1), got {}", self.burn_in));
        }
        if !(self.pcn_beta > 0.0 && self.pcn_beta <= 1.0) {
            return bad(format!("pcn_beta must lie in (0, 1], got {}", self.pcn_beta));
        }
        if self.n_y == 0 || self.n_svi == 0 || self.n_samples == 0 || self.order == 0 || self.components == 0 {
            return bad("n_y, n_svi, n_samples, order and components must be positive".into());
        }
        if self.mcmc_steps < 2 || self.hmc_leapfrog == 0 {
            return bad("MCMC needs at least two steps and one leapfrog step".into());
        }
        if let Some(h) = self.hole {
            if !(h[2] > 0.0) {
                return bad("hole radius must be positive".into());
            }
        }
        match (self.kind, self.method) {
            (Kind::Multimodal, Method::Mixture) => {}
            (Kind::Multimodal, m) => return bad(format!("the multimodal experiment runs the mixture trial, not {}", m.name())),
            (_, Method::Mixture) => return bad("the mixture trial is only available for the multimodal experiment".into()),
            _ => {}
        }
        if let Some(t) = &self.true_params {
            if t.len() != 2 {
                return bad(format!("true_params needs 2 values, got {}", t.len()));
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> Result<String> {
        Ok(sha256_hex(serde_json::to_string(self)?.as_bytes()))
    }

    /// Optimiser settings with the overrides applied.
    pub fn svi_config(&self) -> crate::svi::SviConfig {
        let mut cfg = crate::svi::SviConfig { n_svi: self.n_svi, seed: self.seed, ..Default::default() };
        match self.method {
            Method::Mfvb => cfg.adam = crate::svi::AdamConfig::mean_field(),
            // dense whitened factors jitter at the shared step size
            Method::Fcvb => cfg.adam.alpha = if self.kind == Kind::Poisson2d { 3e-4 } else { 3e-3 },
            _ => {}
        }
        if let Some(v) = self.learning_rate {
            cfg.adam.alpha = v;
        }
        if let Some(v) = self.decay_interval {
            cfg.adam.decay_interval = v;
        }
        if let Some(v) = self.decay_rate {
            cfg.adam.decay_rate = v;
        }
        if let Some(v) = self.max_steps {
            cfg.monitor.max_steps = v;
        }
        if let Some(v) = self.warmup {
            cfg.monitor.warmup = v;
        }
        if let Some(v) = self.patience {
            cfg.monitor.patience = v;
        }
        if let Some(v) = self.tau_rel {
            cfg.monitor.tau_rel = v;
        }
        cfg
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}
