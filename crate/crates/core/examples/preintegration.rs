//! IMU preintegration between two keyframes, first-order bias correction
//! against full re-integration, and the propagated covariance.

use ctrio::imu_preint::{preintegrate, ImuBias, ImuNoiseModel, ImuSample};
use nalgebra::Vector3;

fn main() -> ctrio::Result<()> {
    let noise = ImuNoiseModel::default();
    let samples: Vec<ImuSample> = (0..=20)
        .map(|k| {
            let t = 0.005 * k as f64;
            ImuSample::new(t, Vector3::new(0.3 * (4.0 * t).sin(), 0.1, 9.81), Vector3::new(0.0, 0.2, 0.5 + t))
        })
        .collect();
    let pre = preintegrate(&samples, ImuBias::default(), &noise)?;
    println!("Δt {:.3} s  ΔR angle {:.4} rad  Δv {:?}  Δp {:?}", pre.dt_total, pre.delta_r.angle(), pre.delta_v.as_slice(), pre.delta_p.as_slice());

    let bias = ImuBias::new(Vector3::new(0.002, -0.003, 0.001), Vector3::new(0.03, -0.02, 0.05));
    let (r, v, p) = pre.corrected(&bias);
    let exact = preintegrate(&samples, bias, &noise)?;
    println!(
        "bias update vs re-integration: rotation {:.2e} rad, velocity {:.2e} m/s, position {:.2e} m",
        r.angle_to(&exact.delta_r),
        (v - exact.delta_v).norm(),
        (p - exact.delta_p).norm()
    );
    let sd: Vec<f64> = pre.covariance.diagonal().iter().map(|c| c.sqrt()).collect();
    println!("1σ rotation/velocity/position: {:.2e} rad, {:.2e} m/s, {:.2e} m", sd[0], sd[3], sd[6]);
    Ok(())
}
