//! Temporal-offset convergence from several initial guesses.

use std::time::Instant;

use ctrio::fgo::CalibrationMode;
use ctrio::pipeline::{merge_events, run_single, CalibrationGuess, PipelineConfig};
use ctrio::sim::{generate, SensorRigSpec, TrajectoryKind, TrajectorySpec};
use nalgebra::Vector3;

fn main() -> ctrio::Result<()> {
    let axis = Vector3::new(1.0, -1.0, 1.0).normalize() * 10f64.to_radians();
    let rig = SensorRigSpec {
        true_t_o: 0.1,
        true_r_ir: [axis.x, axis.y, axis.z],
        true_p_ir: [0.10, -0.05, 0.02],
        ..Default::default()
    };
    let data = generate(&TrajectorySpec::new(TrajectoryKind::Sinusoidal3d, 60.0), &rig)?;
    let events = merge_events(&data.imu, &data.scans, &[]);
    for init_ms in [0.0, 25.0, 50.0, 75.0, 100.0, 125.0] {
        let config = PipelineConfig {
            calibration: CalibrationMode::ET,
            initial_calibration: CalibrationGuess { t_o: init_ms * 1e-3, ..Default::default() },
            ..Default::default()
        };
        let start = Instant::now();
        let out = run_single(config, &events)?;
        let at = |t: f64| out.calibration.iter().find(|c| c.t >= t).or(out.calibration.last()).copied().unwrap();
        let c30 = at(12.0 + 30.0);
        let last = *out.calibration.last().unwrap();
        println!(
            "init {init_ms:5.1} ms: t_O@30s {:7.2} ms  final {:7.2} ms  rot err {:.3} deg  trans err {:.4} m  ({:.1} s)",
            c30.t_o * 1e3,
            last.t_o * 1e3,
            last.r_ir.angle_to(&rig.r_ir()).to_degrees(),
            (last.p_ir - rig.p_ir()).norm(),
            start.elapsed().as_secs_f64()
        );
    }
    Ok(())
}
