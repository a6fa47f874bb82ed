use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use pdevi::config::{ExperimentConfig, Kind, Method};
use pdevi::experiment;
use pdevi::{Error, Result};

// stdout may be a closed pipe (`pdevi ... | head`); losing output is fine there
macro_rules! say {
    ($($t:tt)*) => {{
        let _ = writeln!(std::io::stdout(), $($t)*);
    }};
}

macro_rules! say_part {
    ($($t:tt)*) => {{
        let _ = write!(std::io::stdout(), $($t)*);
    }};
}

#[derive(Parser)]
#[command(name = "pdevi", version, about = "Variational Bayes and MCMC for elliptic PDE inverse problems")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Synthesise data for a config into --out.
    Generate(Common),
    /// Run inference and write a run directory to --out.
    Infer(Common),
    /// Compare completed runs that share the same data.
    Evaluate {
        #[command(flatten)]
        common: Common,
        /// Run directories.
        #[arg(required = true)]
        runs: Vec<PathBuf>,
    },
    /// Convert a benchmark CSV pair (observations.csv, kappa.csv) into a data directory.
    BenchmarkImport {
        #[command(flatten)]
        common: Common,
        /// Directory holding observations.csv and kappa.csv.
        path: PathBuf,
    },
    /// Fit the two-component mixture to the multimodal problem.
    MultimodalDemo(Common),
}

#[derive(Args)]
struct Common {
    /// TOML or JSON experiment config.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads; 1 runs everything on the calling thread.
    #[arg(long)]
    threads: Option<usize>,
    #[arg(long)]
    method: Option<Method>,
    #[arg(long)]
    bandwidth: Option<usize>,
    #[arg(long)]
    nsvi: Option<usize>,
    /// Optimiser step cap, or chain length for pCN and HMC.
    #[arg(long)]
    steps: Option<u64>,
}

impl Common {
    fn resolve(&self, kind: Option<Kind>) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(p) => ExperimentConfig::load(p)?,
            None => ExperimentConfig::defaults(kind.unwrap_or(Kind::Poisson1d)),
        };
        if let Some(k) = kind {
            if cfg.kind != k {
                return Err(Error::Config(format!("this command needs kind = \"{}\"", k.name())));
            }
        }
        if let Some(v) = &self.out {
            cfg.out = v.clone();
        }
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if let Some(v) = self.threads {
            cfg.threads = v;
        }
        if let Some(v) = self.method {
            cfg.method = v;
        }
        if let Some(v) = self.bandwidth {
            cfg.bandwidth = Some(v);
        }
        if let Some(v) = self.nsvi {
            cfg.n_svi = v;
        }
        if let Some(v) = self.steps {
            if cfg.method.is_variational() {
                cfg.max_steps = Some(v);
            } else {
                cfg.mcmc_steps = v as usize;
            }
        }
        cfg.validate()?;
        if cfg.threads > 0 {
            rayon::ThreadPoolBuilder::new()
                .num_threads(cfg.threads)
                .build_global()
                .map_err(|e| Error::Config(e.to_string()))?;
        }
        Ok(cfg)
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::Generate(c) => {
            let cfg = c.resolve(None)?;
            let m = experiment::cmd_generate(&cfg)?;
            say!(
                "wrote {} ({} kappa values, {} sensors x {} replicates, data hash {})",
                cfg.out.display(),
                m.n_kappa,
                m.n_sensors,
                m.n_replicates,
                &m.data_hash[..12]
            );
        }
        Cmd::Infer(c) => {
            let cfg = c.resolve(None)?;
            let out = experiment::cmd_infer(&cfg)?;
            report(&out.summary);
            say!("wrote {}", out.dir.display());
        }
        Cmd::Evaluate { common, runs } => {
            let out = common.out.clone();
            common.resolve(None)?;
            let rows = experiment::cmd_evaluate(&runs)?;
            match out {
                Some(p) => {
                    experiment::write_eval_csv(std::fs::File::create(&p)?, &rows)?;
                    say!("wrote {}", p.display());
                }
                None => match experiment::write_eval_csv(std::io::stdout().lock(), &rows) {
                    Err(Error::Io(e)) if e.kind() == std::io::ErrorKind::BrokenPipe => {}
                    r => r?,
                },
            }
        }
        Cmd::BenchmarkImport { common, path } => {
            let cfg = common.resolve(Some(Kind::Benchmark))?;
            let m = experiment::cmd_benchmark_import(&path, &cfg)?;
            say!("imported {} observations and {} kappa values into {}", m.n_sensors, m.n_kappa, cfg.out.display());
        }
        Cmd::MultimodalDemo(c) => {
            let cfg = c.resolve(Some(Kind::Multimodal))?;
            let out = experiment::cmd_multimodal_demo(&cfg)?;
            report(&out.summary);
            if let Some(y) = out.summary.observed_mean {
                say!("observed mean u(0.5) = {y:.4}");
            }
            for (k, c) in out.summary.components.iter().enumerate() {
                say!(
                    "component {k}: kappa {:.3}, ln u_R {:.3}, u(0.5) at mean {:.4}",
                    c.mean[0], c.mean[1], c.forward
                );
            }
            say!("wrote {}", out.dir.display());
        }
    }
    Ok(())
}

fn report(s: &experiment::RunSummary) {
    say_part!("{} on {}: {:.2}s", s.method.name(), s.kind.name(), s.wall_seconds);
    if let (Some(steps), Some(stop)) = (s.steps, &s.stop) {
        say_part!(", {steps} steps ({stop})");
    }
    if let Some(e) = s.final_elbo {
        say_part!(", ELBO {e:.2}");
    }
    if let Some(c) = &s.chain {
        say_part!(", acceptance {:.3}, ESS {:.0}-{:.0}", c.acceptance, c.ess_min, c.ess_max);
    }
    say!();
    if let Some(m) = &s.metrics {
        say!(
            "mean kappa error {:.4}, expected u error {:.4}, QoI {:.4} +- {:.4}",
            m.mean_kappa_error, m.expected_u_error, m.qoi_mean, m.qoi_std
        );
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
