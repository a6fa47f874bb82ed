// Forward solve against the exact 1D solution, then the adjoint gradient of
// the log-likelihood against central finite differences.

use pdevi::config::{ExperimentConfig, Kind};
use pdevi::experiment::{likelihood, setup, synthesize_dataset};
use pdevi::fem::Poisson;
use pdevi::likelihood::LogLikelihood;
use pdevi::mesh::Mesh;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> pdevi::Result<()> {
    let mut m = Mesh::interval(32, 0.0, 1.0)?;
    m.set_dirichlet(0, 0.0)?;
    m.set_dirichlet(32, 0.0)?;
    let p = Poisson::new(m, 1.0)?;
    let u = p.solve(&[0.0; 32])?.u;
    let err = p.mesh().coords().iter().zip(&u).map(|(x, v)| (v - x[0] * (1.0 - x[0]) / 2.0).abs()).fold(0.0, f64::max);
    println!("unit conductivity, 32 elements: max nodal error {err:.2e}");

    for kind in [Kind::Poisson1d, Kind::Poisson2d] {
        let cfg = ExperimentConfig::defaults(kind);
        let ds = synthesize_dataset(&cfg)?;
        let s = setup(&cfg, ds.mesh.clone().expect("synthetic data carry a mesh"))?;
        let lik = likelihood(&s, &ds)?;
        let theta = s.prior.sample(&mut ChaCha8Rng::seed_from_u64(7));
        let theta = theta.as_slice();

        let t = std::time::Instant::now();
        let (ll, g) = lik.value_and_grad(theta)?;
        let adj = t.elapsed();
        let h = 1e-6;
        let mut fd = Vec::with_capacity(theta.len());
        for i in 0..theta.len() {
            let (mut a, mut b) = (theta.to_vec(), theta.to_vec());
            a[i] += h;
            b[i] -= h;
            fd.push((lik.value(&a)? - lik.value(&b)?) / (2.0 * h));
        }
        let diff: f64 = g.iter().zip(&fd).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let rel = diff / fd.iter().map(|v| v * v).sum::<f64>().sqrt();
        println!(
            "{}: {} parameters, log-likelihood {ll:.3}, adjoint {:.2?}, relative error against finite differences {rel:.1e}",
            kind.name(),
            theta.len(),
            adj
        );
    }
    Ok(())
}
