//! Score an estimate against simulator truth: APE after alignment, RPE over
//! 10 m segments and calibration errors, as the `eval` subcommand reports.

use ctrio::eval::{evaluate, CalibrationEstimate, CalibrationTruth, StampedPose};
use ctrio::pipeline::{merge_events, run_single, PipelineConfig};
use ctrio::sim::{generate, SensorRigSpec, TrajectoryKind, TrajectorySpec};

fn main() -> ctrio::Result<()> {
    let rig = SensorRigSpec { true_t_o: 0.05, true_p_ir: [0.1, -0.05, 0.02], ..Default::default() };
    let data = generate(&TrajectorySpec::new(TrajectoryKind::Sinusoidal3d, 40.0), &rig)?;
    let out = run_single(PipelineConfig::default(), &merge_events(&data.imu, &data.scans, &[]))?;

    let estimate: Vec<StampedPose> = out.trajectory.iter().map(StampedPose::from).collect();
    let truth: Vec<StampedPose> = data.truth_samples().iter().map(StampedPose::from).collect();
    let last = out.calibration.last().expect("calibration log");
    let calib = (
        CalibrationEstimate { t_o: last.t_o, r_ir: last.r_ir, p_ir: last.p_ir },
        CalibrationTruth { t_o: rig.true_t_o, r_ir: rig.r_ir(), p_ir: rig.p_ir() },
    );
    let (report, per_pose) = evaluate(&estimate, &truth, Some(calib))?;
    println!("{}", serde_json::to_string_pretty(&report)?);
    let worst = per_pose.iter().max_by(|a, b| a.trans.total_cmp(&b.trans)).expect("pairs");
    println!("worst aligned position error {:.3} m at t = {:.1} s", worst.trans, worst.t);
    Ok(())
}
