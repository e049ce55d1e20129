//! Calibration-mode ablation on the excited scenario: none, E, T and ET,
//! scored by APE and RPE against the simulator truth.
//!
//! `cargo run --release --example ablation [t_O seconds]`

use ctrio::eval::{evaluate, EvalReport, StampedPose};
use ctrio::fgo::CalibrationMode;
use ctrio::pipeline::{merge_events, run_single, PipelineConfig};
use ctrio::sim::{generate, SensorRigSpec, TrajectoryKind, TrajectorySpec};
use nalgebra::Vector3;

fn main() -> ctrio::Result<()> {
    let t_o = std::env::args().nth(1).map_or(0.1, |s| s.parse().expect("t_O in seconds"));
    let axis = Vector3::new(1.0, -1.0, 1.0).normalize() * 10f64.to_radians();
    let rig = SensorRigSpec {
        true_t_o: t_o,
        true_r_ir: [axis.x, axis.y, axis.z],
        true_p_ir: [0.10, -0.05, 0.02],
        ..Default::default()
    };
    let data = generate(&TrajectorySpec::new(TrajectoryKind::Sinusoidal3d, 60.0), &rig)?;
    let events = merge_events(&data.imu, &data.scans, &[]);
    let truth: Vec<StampedPose> = data.truth_samples().iter().map(StampedPose::from).collect();

    let score = |mode: CalibrationMode| -> ctrio::Result<EvalReport> {
        let out = run_single(PipelineConfig { calibration: mode, ..Default::default() }, &events)?;
        let est: Vec<StampedPose> = out.trajectory.iter().map(StampedPose::from).collect();
        Ok(evaluate(&est, &truth, None)?.0)
    };
    println!("injected t_O {:.0} ms", t_o * 1e3);
    for mode in [CalibrationMode::None, CalibrationMode::E, CalibrationMode::T, CalibrationMode::ET] {
        let r = score(mode)?;
        println!(
            "{mode:>4?}: APE {:.4} m / {:.3} deg  RPE {:.4} m / {:.3} deg",
            r.ape_trans_mean, r.ape_rot_mean, r.rpe_trans_mean, r.rpe_rot_mean
        );
    }
    Ok(())
}
