//! Fit a uniform cubic B-spline to noisy gyro samples and read back value,
//! derivative and the noise variance the fit leaves at each instant.

use ctrio::bspline::{SplineFitConfig, UniformCubicSpline};
use nalgebra::Vector3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

fn main() -> ctrio::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let sigma = 0.07;
    let noise = Normal::new(0.0, sigma).unwrap();
    let truth = |t: f64| Vector3::new((2.0 * t).sin(), 0.5 * (3.0 * t).cos(), 0.2 * t);
    // 200 Hz over a 160 ms radar window
    let samples: Vec<_> = (0..33)
        .map(|k| {
            let t = 0.005 * k as f64;
            (t, truth(t) + Vector3::from_fn(|_, _| noise.sample(&mut rng)))
        })
        .collect();
    let config = SplineFitConfig { n_segments: 3, lambda: 1e-6 * samples.len() as f64, extrapolation_pad: 0.02 };
    let spline = UniformCubicSpline::fit(&samples, &config)?;
    println!("   t      |err|     |d/dt err|  predicted σ");
    for t in [0.0, 0.04, 0.08, 0.12, 0.16, 0.175] {
        let err = (spline.eval(t) - truth(t)).norm();
        let d_true = Vector3::new(2.0 * (2.0 * t).cos(), -1.5 * (3.0 * t).sin(), 0.2);
        let d_err = (spline.eval_deriv(t, 1)? - d_true).norm();
        let sd = spline.eval_variance_factor(t).map(|f| sigma * f.sqrt());
        println!("{t:6.3}  {err:9.5}  {d_err:9.4}  {}", sd.map_or("-".into(), |s| format!("{s:.5}")));
    }
    Ok(())
}
