//! Smoothing spline with the smoothing parameter chosen by generalized
//! cross-validation; reports the noise estimate and velocity error.
//!
//!     cargo run --release --example spline_smoothing -- [noise_sd]

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use ring_hough::spline::{fit_smoothing_spline, Lambda};

fn main() -> anyhow::Result<()> {
    let sd: f64 = std::env::args().nth(1).map_or(Ok(0.05), |s| s.parse())?;
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let noise = Normal::new(0.0, sd)?;
    let t: Vec<f64> = (0..500).map(|i| i as f64 / 70.0).collect();
    let y: Vec<f64> = t.iter().map(|&x| (2.0 * x).sin() + noise.sample(&mut rng)).collect();

    let fit = fit_smoothing_spline(&t, &y, Lambda::Auto)?;
    let mut vel_err = 0.0f64;
    for &x in &t[10..490] {
        vel_err = vel_err.max((fit.derivative(x) - 2.0 * (2.0 * x).cos()).abs());
    }
    println!("lambda {:.3e}, effective dof {:.1}", fit.lambda, fit.dof);
    println!("noise estimate {:.4} (injected {sd})", fit.sigma_est);
    println!("worst interior velocity error {vel_err:.4}");
    Ok(())
}
