// Full-covariance VB on the benchmark grid. Reads a directory written by
// `pdevi benchmark-import` if one is given, otherwise synthesises the
// two-inclusion surrogate.

use pdevi::config::{ExperimentConfig, Kind, Method};
use pdevi::experiment::{cmd_infer, Dataset};

fn main() -> pdevi::Result<()> {
    let dir = tempfile::tempdir()?;
    let mut cfg = ExperimentConfig::defaults(Kind::Benchmark);
    cfg.method = Method::Fcvb;
    cfg.data_dir = std::env::args().nth(1).map(Into::into);
    cfg.out = dir.path().join("run");
    let out = cmd_infer(&cfg)?;
    let (ds, _) = Dataset::load(&out.dir)?;
    let mean = &out.summary.posterior_mean;
    let cells = cfg.kappa_cells;

    println!("{} in {:.1}s, ELBO {:.1}", ds.origin, out.summary.fit_seconds, out.summary.final_elbo.unwrap_or(f64::NAN));
    println!("posterior mean (top row first):");
    for r in (0..cells).rev() {
        let row: Vec<String> = (0..cells).map(|c| format!("{:+5.2}", mean[r * cells + c])).collect();
        println!("  {}", row.join(" "));
    }
    for (label, pick) in [("ln 10", 1.0), ("ln 0.1", -1.0), ("background", 0.0)] {
        let v: Vec<f64> = ds
            .kappa_true
            .iter()
            .zip(mean)
            .filter(|(t, _)| if pick == 0.0 { **t == 0.0 } else { **t * pick > 1.0 })
            .map(|(_, m)| *m)
            .collect();
        if !v.is_empty() {
            println!("{label:>10} cells: {} of them, average {:+.3}", v.len(), v.iter().sum::<f64>() / v.len() as f64);
        }
    }
    Ok(())
}
