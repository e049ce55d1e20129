//! Converged calibration from an ET run, re-injected as fixed values into a
//! calibration-off run, compared with the zero-initialized calibration-off
//! baseline.

use ctrio::cli;
use ctrio::config::RunConfig;
use ctrio::eval::{evaluate, StampedPose};
use ctrio::fgo::CalibrationMode;
use ctrio::io;
use ctrio::pipeline::{merge_events, run_single, PipelineConfig, PipelineOutput};
use ctrio::sim::{generate, SensorRigSpec, TrajectoryKind, TrajectorySpec};

fn main() -> ctrio::Result<()> {
    let rig = SensorRigSpec { true_t_o: 0.1, true_r_ir: [0.1007, -0.1007, 0.1007], true_p_ir: [0.10, -0.05, 0.02], ..Default::default() };
    let data = generate(&TrajectorySpec::new(TrajectoryKind::Sinusoidal3d, 60.0), &rig)?;
    let events = merge_events(&data.imu, &data.scans, &[]);
    let truth: Vec<StampedPose> = data.truth_samples().iter().map(StampedPose::from).collect();
    let rpe = |out: &PipelineOutput| -> ctrio::Result<f64> {
        let est: Vec<StampedPose> = out.trajectory.iter().map(StampedPose::from).collect();
        Ok(evaluate(&est, &truth, None)?.0.rpe_trans_mean)
    };

    let et = run_single(PipelineConfig::default(), &events)?;
    let dir = std::env::temp_dir().join("ctrio_reinjection");
    std::fs::create_dir_all(&dir)?;
    let calib = dir.join(cli::CALIBRATION_FILE);
    io::write_calibration(&calib, &et.calibration)?;
    let config = cli::cmd_reinject(&calib, &RunConfig::default(), &dir.join("reinjected.toml"))?;
    println!("reinjected calibration: {:?}", config.pipeline.initial_calibration);

    let baseline = run_single(PipelineConfig { calibration: CalibrationMode::None, ..Default::default() }, &events)?;
    let fixed = run_single(config.pipeline, &events)?;
    let (b, f) = (rpe(&baseline)?, rpe(&fixed)?);
    println!("RPE ET {:.4} m", rpe(&et)?);
    println!("RPE calibration off, zero-initialized {b:.4} m");
    println!("RPE calibration off, reinjected       {f:.4} m ({:.0} % lower)", 100.0 * (1.0 - f / b));
    Ok(())
}
