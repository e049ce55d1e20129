//! Radar ego-velocity from one scan with moving targets mixed in.

use ctrio::radar_ego::{estimate_ransac, solve_lsq, RadarPoint, RadarScan, RansacConfig};
use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

fn main() -> ctrio::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let v_true = Vector3::new(3.0, -0.4, 0.1);
    let noise = Normal::new(0.0, 0.05).unwrap();
    let points: Vec<RadarPoint> = (0..100)
        .map(|k| {
            let dir = Vector3::new(rng.random_range(0.2..1.0), rng.random_range(-1.0..1.0), rng.random_range(-0.3..0.3)).normalize();
            let moving = if k % 5 == 0 { rng.random_range(-4.0..4.0) } else { 0.0 };
            RadarPoint::new(dir * rng.random_range(2.0..40.0), -dir.dot(&v_true) + noise.sample(&mut rng) + moving)
        })
        .collect();
    let (naive, _) = solve_lsq(&points)?;
    let m = estimate_ransac(&RadarScan { timestamp: 0.0, points }, &RansacConfig::default())?;
    println!("truth       {:?}", v_true.as_slice());
    println!("plain LSQ   {:?}  error {:.3} m/s", naive.as_slice(), (naive - v_true).norm());
    println!("RANSAC      {:?}  error {:.3} m/s, {} inliers", m.velocity.as_slice(), (m.velocity - v_true).norm(), m.inlier_count);
    let sd = m.covariance.diagonal().map(f64::sqrt);
    println!("reported σ  {:?}", sd.as_slice());
    Ok(())
}
