// Two-component Gaussian mixture VB on the bimodal (kappa, ln u_R) problem.

use pdevi::config::{ExperimentConfig, Kind};
use pdevi::experiment::cmd_multimodal_demo;

fn main() -> pdevi::Result<()> {
    let dir = tempfile::tempdir()?;
    let mut cfg = ExperimentConfig::defaults(Kind::Multimodal);
    cfg.out = dir.path().join("run");
    let out = cmd_multimodal_demo(&cfg)?;
    let s = &out.summary;
    println!("observed u(0.5) = {:.4}, sigma_y = {}", s.observed_mean.unwrap_or(f64::NAN), cfg.sigma_y);
    for (k, c) in s.components.iter().enumerate() {
        println!(
            "component {k}: mean ({:+.3}, {:+.3}), std ({:.3}, {:.3}), u(0.5) {:.4}",
            c.mean[0],
            c.mean[1],
            c.covariance[0][0].sqrt(),
            c.covariance[1][1].sqrt(),
            c.forward
        );
    }
    Ok(())
}
