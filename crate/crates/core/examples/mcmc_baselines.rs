// pCN and HMC reference chains on the 1D default problem, with their
// agreement on the posterior mean.

use pdevi::config::{ExperimentConfig, Kind, Method};
use pdevi::experiment::cmd_infer;

fn main() -> pdevi::Result<()> {
    let dir = tempfile::tempdir()?;
    let mut means = Vec::new();
    for method in [Method::Pcn, Method::Hmc] {
        let mut cfg = ExperimentConfig::defaults(Kind::Poisson1d);
        cfg.method = method;
        cfg.out = dir.path().join(method.name());
        let out = cmd_infer(&cfg)?;
        let s = &out.summary;
        let c = s.chain.as_ref().expect("samplers report a chain summary");
        println!(
            "{}: {} steps in {:.2}s, acceptance {:.3}, ESS {:.0}..{:.0}, kappa error {:.3}",
            method.name(),
            c.steps,
            s.fit_seconds,
            c.acceptance,
            c.ess_min,
            c.ess_max,
            s.metrics.as_ref().map_or(f64::NAN, |m| m.mean_kappa_error)
        );
        means.push(s.posterior_mean.clone());
    }
    let d = means[0].iter().zip(&means[1]).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    println!("largest difference between the posterior means: {d:.3}");
    Ok(())
}
