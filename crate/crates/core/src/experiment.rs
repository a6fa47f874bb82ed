//! The experiment runner behind the command line: data generation, inference
//! dispatch, evaluation tables and benchmark ingestion.
//!
//! A data directory holds `mesh.txt`, `kappa_true.csv`, `sensors.csv`,
//! `observations.csv`, `config.json` and `manifest.json`. A run directory
//! holds a copy of the data plus `trace.csv` (variational runs),
//! `checkpoint.json`, `samples.csv` and `summary.json`.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{sha256_hex, ExperimentConfig, Kind, Method, PriorKernel};
use crate::error::{Error, Result};
use crate::family::{
    Checkpoint, GaussianMixtureTrial, GaussianTrial, MeanField, PreconditionedBanded, WhitenedCholesky,
};
use crate::fem::{noisy_replicates, MultimodalLikelihood, MultimodalProblem, ObservationModel, Poisson, PoissonLikelihood};
use crate::graph::{build_adjacency, reverse_cuthill_mckee, sparsity_pattern, BandProfile};
use crate::mcmc::{self, ChainSummary, HmcConfig, PcnConfig};
use crate::mesh::{BoundaryFacet, Mesh, Point};
use crate::metrics::{self, PosteriorSampleSet};
use crate::prior::{GaussianPrior, MixturePrior, SeKernel};
use crate::svi::{self, SviResult};

const SAMPLE_SEED_MIX: u64 = 0x9e37_79b9_7f4a_7c15;
const EDGE: f64 = 1e-9;

pub const NODAL_PLACEMENT: &str = "one sensor at every node without a Dirichlet condition";

// -------------------------------------------------------------------- data

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataManifest {
    pub kind: Kind,
    pub origin: String,
    pub n_kappa: usize,
    pub n_sensors: usize,
    pub n_replicates: usize,
    pub sigma_y: f64,
    pub data_seed: Option<u64>,
    pub true_length_scale: Option<f64>,
    pub sensor_placement: String,
    /// SHA-256 of every data file.
    pub files: BTreeMap<String, String>,
    pub data_hash: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunInfo {
    pub method: Method,
    pub seed: u64,
    pub config_hash: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub data: DataManifest,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub run: Option<RunInfo>,
}

/// Ground truth, sensors and observations of one experiment.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub kind: Kind,
    pub origin: String,
    pub mesh: Option<Mesh>,
    pub kappa_true: Vec<f64>,
    pub sensors: Vec<Point>,
    /// One row per replicate.
    pub observations: Vec<Vec<f64>>,
    pub sigma_y: f64,
    pub data_seed: Option<u64>,
    pub true_length_scale: Option<f64>,
    pub sensor_placement: String,
}

/// Forward problem, prior and quantity-of-interest facets for a config.
#[derive(Debug, Clone)]
pub struct Setup {
    pub problem: Poisson,
    pub prior: GaussianPrior,
    /// Parameter-level mesh used for the neighbourhood graph and the kernel.
    pub param_mesh: Mesh,
    pub qoi_facets: Vec<BoundaryFacet>,
}

fn default_boundary(kind: Kind, mesh: &mut Mesh) -> Result<()> {
    match kind {
        Kind::Poisson1d => {
            mesh.set_dirichlet_where(0.0, |p| p[0] < EDGE || p[0] > 1.0 - EDGE);
        }
        Kind::Poisson2d => {
            mesh.set_dirichlet_where(0.0, |p| p[0] > 1.0 - EDGE || p[1] > 1.0 - EDGE);
            mesh.mark_neumann_where(|p| p[0] < 1.0 - EDGE && p[1] < 1.0 - EDGE);
        }
        Kind::Benchmark => {
            mesh.set_dirichlet_where(0.0, |p| p[0] < EDGE || p[1] < EDGE || p[0] > 1.0 - EDGE || p[1] > 1.0 - EDGE);
        }
        Kind::Multimodal => return Err(Error::Config("the multimodal problem builds its own mesh".into())),
    }
    Ok(())
}

/// The solution mesh with boundary conditions. A mesh file without Dirichlet
/// nodes receives the boundary conditions of the experiment kind.
pub fn build_mesh(cfg: &ExperimentConfig) -> Result<Mesh> {
    let mut mesh = match (&cfg.mesh_file, cfg.kind) {
        (Some(p), _) => Mesh::load(p)?,
        (None, Kind::Poisson1d) => Mesh::interval(cfg.n_elements, 0.0, 1.0)?,
        (None, Kind::Poisson2d) => Mesh::unit_square_triangles(cfg.nx, cfg.ny, cfg.hole.map(|h| ([h[0], h[1]], h[2])))?,
        (None, Kind::Benchmark) => Mesh::unit_square_quads(cfg.nx, cfg.ny)?,
        (None, Kind::Multimodal) => return Err(Error::Config("the multimodal problem builds its own mesh".into())),
    };
    if mesh.dirichlet().is_empty() {
        default_boundary(cfg.kind, &mut mesh)?;
    }
    Ok(mesh)
}

fn cell_of(p: Point, cells: usize) -> usize {
    let ix = ((p[0] * cells as f64).floor() as usize).min(cells - 1);
    let iy = ((p[1] * cells as f64).floor() as usize).min(cells - 1);
    iy * cells + ix
}

pub fn setup(cfg: &ExperimentConfig, mesh: Mesh) -> Result<Setup> {
    let (problem, param_mesh) = if cfg.kind == Kind::Benchmark {
        let c = cfg.kappa_cells;
        let map: Vec<usize> = mesh.centroids().iter().map(|&p| cell_of(p, c)).collect();
        (Poisson::with_coefficient_map(mesh.clone(), cfg.source, map, c * c)?, Mesh::unit_square_quads(c, c)?)
    } else {
        (Poisson::new(mesh.clone(), cfg.source)?, mesh)
    };
    let n = problem.n_params();
    let prior = match cfg.prior_kernel {
        PriorKernel::Iid => GaussianPrior::iid(n, cfg.prior_sigma)?,
        PriorKernel::Se => {
            GaussianPrior::se(SeKernel::new(cfg.prior_sigma, cfg.prior_length_scale)?, param_mesh.centroids())?
        }
    };
    let qoi_facets = match cfg.kind {
        Kind::Poisson1d => problem.mesh().select_boundary(|p| p[0] < EDGE),
        _ => problem.mesh().select_boundary(|p| p[0] > 1.0 - EDGE),
    };
    Ok(Setup { problem, prior, param_mesh, qoi_facets })
}

/// Zero background with a `ln 10` block in the upper left and a `ln 0.1`
/// block in the lower right of the coefficient grid.
pub fn benchmark_surrogate_kappa(cells: usize) -> Vec<f64> {
    let mut k = vec![0.0; cells * cells];
    for iy in 0..cells {
        for ix in 0..cells {
            let x = (ix as f64 + 0.5) / cells as f64;
            let y = (iy as f64 + 0.5) / cells as f64;
            if (0.125..0.375).contains(&x) && (0.5..0.875).contains(&y) {
                k[iy * cells + ix] = 10f64.ln();
            } else if (0.625..0.875).contains(&x) && (0.125..0.5).contains(&y) {
                k[iy * cells + ix] = 0.1f64.ln();
            }
        }
    }
    k
}

/// Interior `g x g` sensor grid at spacing `1 / (g + 1)`.
pub fn benchmark_sensors(g: usize) -> Vec<Point> {
    let h = 1.0 / (g + 1) as f64;
    (1..=g).flat_map(|j| (1..=g).map(move |i| [i as f64 * h, j as f64 * h])).collect()
}

fn nodal_sensors(mesh: &Mesh) -> Vec<Point> {
    (0..mesh.num_nodes()).filter(|n| !mesh.dirichlet().contains_key(n)).map(|n| mesh.coords()[n]).collect()
}

/// Synthetic data for a config, fully determined by `data_seed`.
pub fn synthesize_dataset(cfg: &ExperimentConfig) -> Result<Dataset> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.data_seed);
    if cfg.kind == Kind::Multimodal {
        let truth = cfg.true_params.clone().unwrap_or_else(|| vec![0.5f64.ln(), 0.25f64.ln()]);
        let problem = MultimodalProblem::new(cfg.n_elements)?;
        let clean = problem.forward(truth[0], truth[1].exp())?;
        let obs = noisy_replicates(&[clean], cfg.sigma_y, cfg.n_y, &mut rng);
        return Ok(Dataset {
            kind: cfg.kind,
            origin: "synthetic".into(),
            mesh: None,
            kappa_true: truth,
            sensors: vec![[0.5, 0.0]],
            observations: obs,
            sigma_y: cfg.sigma_y,
            data_seed: Some(cfg.data_seed),
            true_length_scale: None,
            sensor_placement: "single sensor at x = 0.5".into(),
        });
    }
    let mesh = build_mesh(cfg)?;
    let s = setup(cfg, mesh.clone())?;
    let (kappa_true, length) = if cfg.kind == Kind::Benchmark {
        (benchmark_surrogate_kappa(cfg.kappa_cells), None)
    } else {
        let truth = GaussianPrior::se(SeKernel::new(cfg.prior_sigma, cfg.true_length_scale)?, s.param_mesh.centroids())?;
        (truth.sample(&mut rng).iter().copied().collect(), Some(cfg.true_length_scale))
    };
    let (sensors, placement) = if cfg.kind == Kind::Benchmark {
        (benchmark_sensors(cfg.sensor_grid), format!("{0}x{0} interior grid", cfg.sensor_grid))
    } else {
        (nodal_sensors(&mesh), NODAL_PLACEMENT.to_string())
    };
    let template = ObservationModel::at_points(&mesh, &sensors, cfg.sigma_y, vec![])?;
    let clean = template.apply(&s.problem.solve(&kappa_true)?.u);
    let observations = noisy_replicates(&clean, cfg.sigma_y, cfg.n_y, &mut rng);
    Ok(Dataset {
        kind: cfg.kind,
        origin: if cfg.kind == Kind::Benchmark { "benchmark-surrogate" } else { "synthetic" }.into(),
        mesh: Some(mesh),
        kappa_true,
        sensors,
        observations,
        sigma_y: cfg.sigma_y,
        data_seed: Some(cfg.data_seed),
        true_length_scale: length,
        sensor_placement: placement,
    })
}

fn csv_bytes(header: &[String], rows: &[Vec<f64>]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header)?;
    for r in rows {
        w.write_record(r.iter().map(|v| format!("{v:?}")))?;
    }
    w.into_inner().map_err(|e| Error::Io(e.into_error()))
}

fn read_csv_rows(path: &Path) -> Result<(Vec<String>, Vec<Vec<f64>>)> {
    let mut r = csv::Reader::from_path(path)?;
    let header = r.headers()?.iter().map(|h| h.trim().to_string()).collect();
    let mut rows = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let row = rec?
            .iter()
            .map(|v| {
                v.trim().parse::<f64>().map_err(|e| Error::Parse {
                    line: i + 2,
                    msg: format!("{}: {e}", path.display()),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        rows.push(row);
    }
    Ok((header, rows))
}

impl Dataset {
    fn files(&self) -> Result<Vec<(&'static str, Vec<u8>)>> {
        let mut files = Vec::new();
        if let Some(m) = &self.mesh {
            files.push(("mesh.txt", m.to_text().into_bytes()));
        }
        let kappa: Vec<Vec<f64>> = self.kappa_true.iter().map(|&v| vec![v]).collect();
        files.push(("kappa_true.csv", csv_bytes(&["kappa".into()], &kappa)?));
        let sensors: Vec<Vec<f64>> = self.sensors.iter().map(|p| p.to_vec()).collect();
        files.push(("sensors.csv", csv_bytes(&["x".into(), "y".into()], &sensors)?));
        let header: Vec<String> = (0..self.sensors.len()).map(|i| format!("y{i}")).collect();
        files.push(("observations.csv", csv_bytes(&header, &self.observations)?));
        Ok(files)
    }

    /// Writes the data files into `dir` and returns their manifest.
    pub fn write(&self, dir: &Path) -> Result<DataManifest> {
        fs::create_dir_all(dir)?;
        let mut hashes = BTreeMap::new();
        for (name, bytes) in self.files()? {
            fs::write(dir.join(name), &bytes)?;
            hashes.insert(name.to_string(), sha256_hex(&bytes));
        }
        let joined: String = hashes.iter().map(|(k, v)| format!("{k}:{v}\n")).collect();
        Ok(DataManifest {
            kind: self.kind,
            origin: self.origin.clone(),
            n_kappa: self.kappa_true.len(),
            n_sensors: self.sensors.len(),
            n_replicates: self.observations.len(),
            sigma_y: self.sigma_y,
            data_seed: self.data_seed,
            true_length_scale: self.true_length_scale,
            sensor_placement: self.sensor_placement.clone(),
            files: hashes,
            data_hash: sha256_hex(joined.as_bytes()),
        })
    }

    /// Reads a data or run directory, checking every file against the
    /// manifest hashes.
    pub fn load(dir: &Path) -> Result<(Dataset, Manifest)> {
        let manifest = read_manifest(dir)?;
        let d = &manifest.data;
        for (name, hash) in &d.files {
            let bytes = fs::read(dir.join(name))
                .map_err(|e| Error::DataMismatch(format!("{}: {e}", dir.join(name).display())))?;
            if &sha256_hex(&bytes) != hash {
                return Err(Error::DataMismatch(format!("{} does not match its manifest hash", dir.join(name).display())));
            }
        }
        let mesh = if d.files.contains_key("mesh.txt") { Some(Mesh::load(&dir.join("mesh.txt"))?) } else { None };
        let (_, kappa) = read_csv_rows(&dir.join("kappa_true.csv"))?;
        let (_, sensors) = read_csv_rows(&dir.join("sensors.csv"))?;
        let (_, observations) = read_csv_rows(&dir.join("observations.csv"))?;
        let ds = Dataset {
            kind: d.kind,
            origin: d.origin.clone(),
            mesh,
            kappa_true: kappa.into_iter().map(|r| r[0]).collect(),
            sensors: sensors.into_iter().map(|r| [r[0], r[1]]).collect(),
            observations,
            sigma_y: d.sigma_y,
            data_seed: d.data_seed,
            true_length_scale: d.true_length_scale,
            sensor_placement: d.sensor_placement.clone(),
        };
        if ds.kappa_true.len() != d.n_kappa
            || ds.sensors.len() != d.n_sensors
            || ds.observations.len() != d.n_replicates
            || ds.observations.iter().any(|r| r.len() != d.n_sensors)
        {
            return Err(Error::DataMismatch(format!("{} disagrees with its manifest counts", dir.display())));
        }
        Ok((ds, manifest))
    }
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join("manifest.json");
    let text = fs::read_to_string(&path).map_err(|e| Error::DataMismatch(format!("{}: {e}", path.display())))?;
    Ok(serde_json::from_str(&text)?)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}

/// Writes synthetic data, `config.json` and `manifest.json` to `cfg.out`.
pub fn cmd_generate(cfg: &ExperimentConfig) -> Result<DataManifest> {
    let ds = synthesize_dataset(cfg)?;
    let data = ds.write(&cfg.out)?;
    fs::write(cfg.out.join("config.json"), cfg.to_json()? + "\n")?;
    write_json(&cfg.out.join("manifest.json"), &Manifest { data: data.clone(), run: None })?;
    Ok(data)
}

// ------------------------------------------------------------- benchmark

/// Converts the benchmark pair `observations.csv` (`x,y,value`) and
/// `kappa.csv` (`ix,iy,kappa`, cell indices from the lower left) in `src`
/// into a data directory at `cfg.out`.
pub fn cmd_benchmark_import(src: &Path, cfg: &ExperimentConfig) -> Result<DataManifest> {
    if cfg.kind != Kind::Benchmark {
        return Err(Error::Config("benchmark-import needs kind = \"benchmark\"".into()));
    }
    let n_obs = cfg.sensor_grid * cfg.sensor_grid;
    let c = cfg.kappa_cells;
    let (oh, obs) = read_csv_rows(&src.join("observations.csv"))?;
    if oh != ["x", "y", "value"] {
        return Err(Error::DataMismatch(format!("observations.csv header must be x,y,value, got {}", oh.join(","))));
    }
    if obs.len() != n_obs || obs.iter().any(|r| r.len() != 3) {
        return Err(Error::DataMismatch(format!("expected {n_obs} observations with x,y,value, got {} rows", obs.len())));
    }
    let (kh, kap) = read_csv_rows(&src.join("kappa.csv"))?;
    if kh != ["ix", "iy", "kappa"] {
        return Err(Error::DataMismatch(format!("kappa.csv header must be ix,iy,kappa, got {}", kh.join(","))));
    }
    if kap.len() != c * c || kap.iter().any(|r| r.len() != 3) {
        return Err(Error::DataMismatch(format!("expected {} kappa values, got {} rows", c * c, kap.len())));
    }
    let mut kappa = vec![f64::NAN; c * c];
    for r in &kap {
        let (ix, iy) = (r[0], r[1]);
        if ix.fract() != 0.0 || iy.fract() != 0.0 || ix < 0.0 || iy < 0.0 || ix >= c as f64 || iy >= c as f64 {
            return Err(Error::DataMismatch(format!("kappa cell ({ix}, {iy}) outside the {c}x{c} grid")));
        }
        if !r[2].is_finite() || r[2].abs() > 10.0 {
            return Err(Error::DataMismatch(format!("kappa at cell ({ix}, {iy}) must be finite and within [-10, 10], got {}", r[2])));
        }
        kappa[iy as usize * c + ix as usize] = r[2];
    }
    if kappa.iter().any(|v| v.is_nan()) {
        return Err(Error::DataMismatch("kappa.csv lists a cell twice".into()));
    }
    let mut sensors = Vec::with_capacity(n_obs);
    let mut values = Vec::with_capacity(n_obs);
    for r in &obs {
        if !(0.0..=1.0).contains(&r[0]) || !(0.0..=1.0).contains(&r[1]) || !r[2].is_finite() {
            return Err(Error::DataMismatch(format!("observation ({}, {}, {}) is invalid", r[0], r[1], r[2])));
        }
        sensors.push([r[0], r[1]]);
        values.push(r[2]);
    }
    let mesh = build_mesh(cfg)?;
    ObservationModel::at_points(&mesh, &sensors, cfg.sigma_y, vec![values.clone()])?;
    let ds = Dataset {
        kind: Kind::Benchmark,
        origin: "benchmark-import".into(),
        mesh: Some(mesh),
        kappa_true: kappa,
        sensors,
        observations: vec![values],
        sigma_y: cfg.sigma_y,
        data_seed: None,
        true_length_scale: None,
        sensor_placement: "benchmark sensor locations".into(),
    };
    let data = ds.write(&cfg.out)?;
    fs::write(cfg.out.join("config.json"), cfg.to_json()? + "\n")?;
    write_json(&cfg.out.join("manifest.json"), &Manifest { data: data.clone(), run: None })?;
    Ok(data)
}

/// Writes a dataset as the benchmark CSV pair accepted by
/// [`cmd_benchmark_import`].
pub fn export_benchmark_csv(ds: &Dataset, cells: usize, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut w = csv::Writer::from_path(dir.join("observations.csv"))?;
    w.write_record(["x", "y", "value"])?;
    for (p, v) in ds.sensors.iter().zip(&ds.observations[0]) {
        w.write_record([format!("{:?}", p[0]), format!("{:?}", p[1]), format!("{v:?}")])?;
    }
    w.flush()?;
    let mut w = csv::Writer::from_path(dir.join("kappa.csv"))?;
    w.write_record(["ix", "iy", "kappa"])?;
    for (i, v) in ds.kappa_true.iter().enumerate() {
        w.write_record([(i % cells).to_string(), (i / cells).to_string(), format!("{v:?}")])?;
    }
    w.flush()?;
    Ok(())
}

// --------------------------------------------------------------- inference

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub mean_kappa_error: f64,
    pub expected_u_error: f64,
    pub qoi_mean: f64,
    pub qoi_std: f64,
    pub qoi_excluded: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComponentSummary {
    pub mean: Vec<f64>,
    pub covariance: Vec<Vec<f64>>,
    /// `u(0.5)` at the component mean.
    pub forward: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunSummary {
    pub kind: Kind,
    pub method: Method,
    pub seed: u64,
    pub config_hash: String,
    pub data_hash: String,
    pub n_params: usize,
    pub n_samples: usize,
    /// Fit or chain plus posterior sampling.
    pub wall_seconds: f64,
    pub fit_seconds: f64,
    pub posterior_mean: Vec<f64>,
    pub posterior_std: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub steps: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stop: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub final_elbo: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask_entries: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub chain: Option<ChainSummary>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub metrics: Option<RunMetrics>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub components: Vec<ComponentSummary>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub observed_mean: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub dir: PathBuf,
    pub summary: RunSummary,
    pub samples: Vec<Vec<f64>>,
    pub checkpoint: Option<Checkpoint>,
}

pub fn compute_metrics(s: &Setup, kappa_true: &[f64], samples: &[Vec<f64>]) -> Result<RunMetrics> {
    let q = metrics::qoi_distribution(samples, &s.problem, &s.qoi_facets)?;
    Ok(RunMetrics {
        mean_kappa_error: metrics::mean_kappa_error(samples, kappa_true)?,
        expected_u_error: metrics::expected_solution_error(samples, kappa_true, &s.problem)?,
        qoi_mean: q.mean,
        qoi_std: q.std,
        qoi_excluded: q.excluded,
    })
}

fn load_or_synthesize(cfg: &ExperimentConfig) -> Result<Dataset> {
    let Some(dir) = &cfg.data_dir else {
        return synthesize_dataset(cfg);
    };
    let (ds, _) = Dataset::load(dir)?;
    if ds.kind != cfg.kind {
        return Err(Error::DataMismatch(format!(
            "data in {} are for {}, the config asks for {}",
            dir.display(),
            ds.kind.name(),
            cfg.kind.name()
        )));
    }
    Ok(ds)
}

/// Likelihood for a Poisson-type dataset.
pub fn likelihood(s: &Setup, ds: &Dataset) -> Result<PoissonLikelihood> {
    let mesh = s.problem.mesh();
    if ds.kappa_true.len() != s.problem.n_params() {
        return Err(Error::DataMismatch(format!(
            "data carry {} kappa values, the problem has {}",
            ds.kappa_true.len(),
            s.problem.n_params()
        )));
    }
    let obs = ObservationModel::at_points(mesh, &ds.sensors, ds.sigma_y, ds.observations.clone())?;
    Ok(PoissonLikelihood { problem: s.problem.clone(), obs })
}

fn trace_elbo(res: &SviResult) -> Option<f64> {
    let k = res.trace.len();
    let tail = &res.trace[k.saturating_sub(100)..];
    (!tail.is_empty()).then(|| tail.iter().map(|t| t.elbo).sum::<f64>() / tail.len() as f64)
}

fn stop_name(res: &SviResult) -> String {
    format!("{:?}", res.stop).to_lowercase()
}

/// Runs the configured method and writes the run directory `cfg.out`.
pub fn cmd_infer(cfg: &ExperimentConfig) -> Result<RunOutput> {
    cfg.validate()?;
    let ds = load_or_synthesize(cfg)?;
    let out = cfg.out.clone();
    fs::create_dir_all(&out)?;
    let data = ds.write(&out)?;
    let config_hash = cfg.hash()?;
    fs::write(out.join("config.json"), cfg.to_json()? + "\n")?;
    let run = RunInfo { method: cfg.method, seed: cfg.seed, config_hash: config_hash.clone() };
    write_json(&out.join("manifest.json"), &Manifest { data: data.clone(), run: Some(run) })?;

    let mut out = if cfg.kind == Kind::Multimodal {
        infer_multimodal(cfg, &ds, &out)?
    } else {
        infer_poisson(cfg, &ds, &out)?
    };
    out.summary.config_hash = config_hash;
    out.summary.data_hash = data.data_hash;
    let set = PosteriorSampleSet::new(out.samples, cfg.method.name(), cfg.seed, &out.summary.config_hash)?;
    mcmc::write_samples_csv(&out.dir.join("samples.csv"), &set.samples)?;
    write_json(&out.dir.join("summary.json"), &out.summary)?;
    out.samples = set.samples;
    Ok(out)
}

fn base_summary(cfg: &ExperimentConfig, n: usize, samples: &[Vec<f64>], wall: f64, fit: f64) -> Result<RunSummary> {
    let ps = metrics::posterior_summary(samples)?;
    Ok(RunSummary {
        kind: cfg.kind,
        method: cfg.method,
        seed: cfg.seed,
        config_hash: String::new(),
        data_hash: String::new(),
        n_params: n,
        n_samples: samples.len(),
        wall_seconds: wall,
        fit_seconds: fit,
        posterior_mean: ps.mean,
        posterior_std: ps.std,
        steps: None,
        stop: None,
        final_elbo: None,
        mask_entries: None,
        chain: None,
        metrics: None,
        components: vec![],
        observed_mean: None,
    })
}

/// The PMVB band profile: reverse Cuthill-McKee on the order-`order`
/// neighbourhood graph, with the band overridden by `bandwidth`.
pub fn pmvb_profile(param_mesh: &Mesh, order: usize, bandwidth: Option<usize>) -> Result<BandProfile> {
    let base = reverse_cuthill_mckee(&build_adjacency(param_mesh, order)?);
    let n = base.permutation.len();
    let bw = bandwidth.unwrap_or(base.bandwidth).min(n.saturating_sub(1));
    Ok(BandProfile { permutation: base.permutation, bandwidth: bw })
}

fn infer_poisson(cfg: &ExperimentConfig, ds: &Dataset, dir: &Path) -> Result<RunOutput> {
    let mesh = ds.mesh.clone().ok_or_else(|| Error::DataMismatch("data have no mesh".into()))?;
    let s = setup(cfg, mesh)?;
    let lik = likelihood(&s, ds)?;
    let n = s.problem.n_params();
    let prior = &s.prior;
    let svi_cfg = cfg.svi_config();
    let sample_seed = cfg.seed ^ SAMPLE_SEED_MIX;
    let start = Instant::now();

    let mut checkpoint = None;
    let mut fit_res = None;
    let mut chain_summary = None;
    let mut mask_entries = None;
    let samples = match cfg.method {
        Method::Mfvb => {
            let mut q = MeanField::new(n, cfg.init_scale * cfg.prior_sigma);
            fit_res = Some(svi::fit(&mut q, prior, &lik, &svi_cfg)?);
            checkpoint = Some(q.checkpoint());
            metrics::sample_trial(&q, cfg.n_samples, sample_seed)
        }
        Method::Fcvb => {
            let mut q = WhitenedCholesky::new(prior, cfg.init_scale);
            fit_res = Some(svi::fit(&mut q, prior, &lik, &svi_cfg)?);
            checkpoint = Some(q.checkpoint());
            metrics::sample_trial(q.trial(), cfg.n_samples, sample_seed)
        }
        Method::Pmvb => {
            let profile = pmvb_profile(&s.param_mesh, cfg.order, cfg.bandwidth)?;
            mask_entries = Some(sparsity_pattern(&profile).count());
            let mut q = PreconditionedBanded::new(profile, prior, cfg.init_scale)?;
            fit_res = Some(svi::fit(&mut q, prior, &lik, &svi_cfg)?);
            checkpoint = Some(q.checkpoint());
            metrics::sample_trial(q.trial(), cfg.n_samples, sample_seed)
        }
        Method::Pcn => {
            let pc = PcnConfig { beta: cfg.pcn_beta, steps: cfg.mcmc_steps, burn_in: cfg.burn_in, ..Default::default() };
            let chain = mcmc::run_pcn(prior, &lik, &pc, cfg.seed)?;
            let samples = chain.thinned(cfg.n_samples);
            chain_summary = Some(chain.summary);
            samples
        }
        Method::Hmc => {
            let hc = HmcConfig {
                step_size: cfg.hmc_step_size,
                leapfrog: cfg.hmc_leapfrog,
                steps: cfg.mcmc_steps,
                warmup: cfg.burn_in,
                ..Default::default()
            };
            let chain = mcmc::run_hmc_whitened(prior, &lik, &hc, cfg.seed)?;
            let samples = chain.thinned(cfg.n_samples);
            chain_summary = Some(chain.summary);
            samples
        }
        Method::Mixture => unreachable!("rejected by validation"),
    };
    let wall = start.elapsed().as_secs_f64();
    let fit_seconds = fit_res.as_ref().map_or_else(
        || chain_summary.as_ref().map_or(wall, |c| c.wall_seconds),
        |r| r.wall_seconds,
    );

    if let Some(res) = &fit_res {
        svi::write_trace(&dir.join("trace.csv"), &res.trace)?;
    }
    if let Some(cp) = &checkpoint {
        write_json(&dir.join("checkpoint.json"), cp)?;
    }
    let mut summary = base_summary(cfg, n, &samples, wall, fit_seconds)?;
    summary.steps = fit_res.as_ref().map(|r| r.steps);
    summary.stop = fit_res.as_ref().map(stop_name);
    summary.final_elbo = fit_res.as_ref().and_then(trace_elbo);
    summary.mask_entries = mask_entries;
    summary.chain = chain_summary;
    summary.metrics = Some(compute_metrics(&s, &ds.kappa_true, &samples)?);
    Ok(RunOutput { dir: dir.to_path_buf(), summary, samples, checkpoint })
}

fn infer_multimodal(cfg: &ExperimentConfig, ds: &Dataset, dir: &Path) -> Result<RunOutput> {
    let problem = MultimodalProblem::new(cfg.n_elements)?;
    let data: Vec<f64> = ds.observations.iter().map(|r| r[0]).collect();
    let lik = MultimodalLikelihood::new(problem.clone(), ds.sigma_y, data.clone())?;
    let prior = MixturePrior::multimodal();
    let start = Instant::now();
    let mut q = GaussianMixtureTrial::from_prior(&prior, cfg.components, cfg.init_scale, cfg.seed)?;
    let res = svi::fit_mixture(&mut q, &prior, &lik, &cfg.svi_config())?;
    let samples = metrics::sample_mixture(&q, cfg.n_samples, cfg.seed ^ SAMPLE_SEED_MIX);
    let wall = start.elapsed().as_secs_f64();

    svi::write_trace(&dir.join("trace.csv"), &res.trace)?;
    let cp = q.checkpoint();
    write_json(&dir.join("checkpoint.json"), &cp)?;
    let mut summary = base_summary(cfg, 2, &samples, wall, res.wall_seconds)?;
    summary.steps = Some(res.steps);
    summary.stop = Some(stop_name(&res));
    summary.final_elbo = trace_elbo(&res);
    summary.components = q
        .components()
        .iter()
        .map(|c| {
            let m = c.mean();
            let cov = c.covariance();
            Ok(ComponentSummary {
                mean: m.iter().copied().collect(),
                covariance: (0..2).map(|i| (0..2).map(|j| cov[(i, j)]).collect()).collect(),
                forward: problem.forward(m[0], m[1].exp())?,
            })
        })
        .collect::<Result<_>>()?;
    summary.observed_mean = Some(data.iter().sum::<f64>() / data.len() as f64);
    Ok(RunOutput { dir: dir.to_path_buf(), summary, samples, checkpoint: Some(cp) })
}

/// Data generation and a mixture fit for the multimodal problem in one go.
pub fn cmd_multimodal_demo(cfg: &ExperimentConfig) -> Result<RunOutput> {
    if cfg.kind != Kind::Multimodal {
        return Err(Error::Config("multimodal-demo needs kind = \"multimodal\"".into()));
    }
    cmd_infer(cfg)
}

// -------------------------------------------------------------- evaluation

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub run: String,
    pub method: String,
    pub seed: u64,
    pub n_samples: usize,
    pub mean_kappa_error: f64,
    pub expected_u_error: f64,
    pub qoi_mean: f64,
    pub qoi_std: f64,
    pub qoi_excluded: usize,
    pub wall_seconds: f64,
}

/// Recomputes the comparison metrics of completed runs from their samples.
/// All runs must share the same data.
pub fn cmd_evaluate(runs: &[PathBuf]) -> Result<Vec<EvalRow>> {
    if runs.is_empty() {
        return Err(Error::Config("evaluate needs at least one run directory".into()));
    }
    let mut reference: Option<(String, PathBuf)> = None;
    let mut rows = Vec::new();
    for dir in runs {
        let (ds, manifest) = Dataset::load(dir)?;
        let Some(run) = &manifest.run else {
            return Err(Error::DataMismatch(format!("{} is a data directory, not a run", dir.display())));
        };
        match &reference {
            None => reference = Some((manifest.data.data_hash.clone(), dir.clone())),
            Some((h, first)) if *h != manifest.data.data_hash => {
                return Err(Error::DataMismatch(format!(
                    "{} and {} were run on different data",
                    first.display(),
                    dir.display()
                )));
            }
            _ => {}
        }
        if ds.kind == Kind::Multimodal {
            return Err(Error::Config("evaluate compares Poisson-type runs; the multimodal summary is in summary.json".into()));
        }
        let cfg = ExperimentConfig::load(&dir.join("config.json"))?;
        if cfg.hash()? != run.config_hash {
            return Err(Error::DataMismatch(format!("{}/config.json does not match its manifest", dir.display())));
        }
        let summary: RunSummary = serde_json::from_str(&fs::read_to_string(dir.join("summary.json"))?)?;
        let samples = mcmc::read_samples_csv(&dir.join("samples.csv"))?;
        let mesh = ds.mesh.clone().ok_or_else(|| Error::DataMismatch("data have no mesh".into()))?;
        let s = setup(&cfg, mesh)?;
        let m = compute_metrics(&s, &ds.kappa_true, &samples)?;
        rows.push(EvalRow {
            run: dir.display().to_string(),
            method: run.method.name().into(),
            seed: run.seed,
            n_samples: samples.len(),
            mean_kappa_error: m.mean_kappa_error,
            expected_u_error: m.expected_u_error,
            qoi_mean: m.qoi_mean,
            qoi_std: m.qoi_std,
            qoi_excluded: m.qoi_excluded,
            wall_seconds: summary.wall_seconds,
        });
    }
    Ok(rows)
}

pub fn write_eval_csv<W: std::io::Write>(w: W, rows: &[EvalRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(w);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}
