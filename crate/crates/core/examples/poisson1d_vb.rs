// The three variational families on the 1D default problem. Usage:
// `cargo run --release --example poisson1d_vb [seed]`.

use pdevi::config::{ExperimentConfig, Kind, Method};
use pdevi::experiment::cmd_infer;

fn main() -> pdevi::Result<()> {
    let seed = std::env::args().nth(1).map_or(1, |s| s.parse().expect("seed must be an integer"));
    let dir = tempfile::tempdir()?;
    let mut fcvb_std = None;
    for (method, bw) in [(Method::Mfvb, None), (Method::Fcvb, None), (Method::Pmvb, Some(2)), (Method::Pmvb, Some(10))] {
        let mut cfg = ExperimentConfig::defaults(Kind::Poisson1d);
        cfg.method = method;
        cfg.bandwidth = bw;
        cfg.seed = seed;
        cfg.out = dir.path().join(format!("{}-{}", method.name(), bw.unwrap_or(0)));
        let out = cmd_infer(&cfg)?;
        let s = &out.summary;
        let std = s.posterior_std.iter().sum::<f64>() / s.posterior_std.len() as f64;
        if method == Method::Fcvb {
            fcvb_std = Some(std);
        }
        let m = s.metrics.as_ref().expect("synthetic runs have a truth");
        print!(
            "{:>4}{:>4}: {:>6} steps {:6.2}s  ELBO {:7.1}  mean std {:.4}  kappa err {:.3}  QoI {:.4} +- {:.4}",
            method.name(),
            bw.map(|b| format!(" b{b}")).unwrap_or_default(),
            s.steps.unwrap_or(0),
            s.fit_seconds,
            s.final_elbo.unwrap_or(f64::NAN),
            std,
            m.mean_kappa_error,
            m.qoi_mean,
            m.qoi_std
        );
        match (method, fcvb_std) {
            (Method::Pmvb, Some(f)) => println!("  std / FCVB {:.2}", std / f),
            _ => println!(),
        }
    }
    Ok(())
}
