// Draws from the squared-exponential prior over 1D element centroids and
// compares the empirical covariance with the kernel. Ends with closed-form
// conditioning on three noise-free values.

use nalgebra::DVector;
use pdevi::metrics::sample_covariance;
use pdevi::prior::{gp_condition, GaussianPrior, SeKernel};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> pdevi::Result<()> {
    let n = 32;
    let centroids: Vec<[f64; 2]> = (0..n).map(|e| [(e as f64 + 0.5) / n as f64, 0.0]).collect();
    let kernel = SeKernel::new(1.0, 0.2)?;
    let prior = GaussianPrior::se(kernel, &centroids)?;
    println!("jitter {:.1e}, log det {:.2}", prior.jitter(), prior.log_det());

    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let draws: Vec<Vec<f64>> = (0..20_000).map(|_| prior.sample(&mut rng).as_slice().to_vec()).collect();
    let cov = sample_covariance(&draws)?;
    let gap = (&cov - prior.cov()).abs().max();
    println!("20000 draws: largest covariance entry error {gap:.3}");
    for lag in [0, 3, 6, 12] {
        println!("  lag {lag:2}: empirical {:.3}, kernel {:.3}", cov[(0, lag)], kernel.eval(centroids[0], centroids[lag]));
    }

    let x = [[0.1, 0.0], [0.5, 0.0], [0.9, 0.0]];
    let xs: Vec<[f64; 2]> = (0..=10).map(|i| [i as f64 / 10.0, 0.0]).collect();
    let (m, c) = gp_condition(kernel, &x, &DVector::from_vec(vec![1.0, -0.5, 0.25]), &xs)?;
    for (i, p) in xs.iter().enumerate() {
        println!("  x = {:.1}: mean {:+.3}, std {:.3}", p[0], m[i], c[(i, i)].max(0.0).sqrt());
    }
    Ok(())
}
