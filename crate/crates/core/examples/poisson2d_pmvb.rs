// Banded-precision VB on the 2D mesh with a hole. A full run takes a couple of
// minutes in release mode; pass a step cap to shorten it:
// `cargo run --release --example poisson2d_pmvb [bandwidth] [max_steps]`.

use pdevi::config::{ExperimentConfig, Kind, Method};
use pdevi::experiment::cmd_infer;

fn main() -> pdevi::Result<()> {
    let mut args = std::env::args().skip(1);
    let bw: usize = args.next().map_or(10, |s| s.parse().expect("bandwidth must be an integer"));
    let cap: Option<u64> = args.next().map(|s| s.parse().expect("max_steps must be an integer"));

    let dir = tempfile::tempdir()?;
    let mut cfg = ExperimentConfig::defaults(Kind::Poisson2d);
    cfg.method = Method::Pmvb;
    cfg.bandwidth = Some(bw);
    cfg.max_steps = cap;
    cfg.out = dir.path().join("run");
    let out = cmd_infer(&cfg)?;
    let s = &out.summary;
    println!(
        "{} parameters, {} band entries, {} steps ({}) in {:.1}s, ELBO {:.1}",
        s.n_params,
        s.mask_entries.unwrap_or(0),
        s.steps.unwrap_or(0),
        s.stop.as_deref().unwrap_or("-"),
        s.fit_seconds,
        s.final_elbo.unwrap_or(f64::NAN)
    );
    if let Some(m) = &s.metrics {
        println!(
            "kappa error {:.3}, u error {:.4}, outflux log {:.4} +- {:.4}",
            m.mean_kappa_error, m.expected_u_error, m.qoi_mean, m.qoi_std
        );
    }
    Ok(())
}
