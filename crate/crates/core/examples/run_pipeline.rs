//! Full estimator on a simulated figure-eight with the optimizer and the
//! high-rate navigator on separate threads.

use ctrio::fgo::CalibrationMode;
use ctrio::pipeline::{merge_events, run_threaded, PipelineConfig};
use ctrio::sim::{generate, SensorRigSpec, TrajectoryKind, TrajectorySpec};

fn main() -> ctrio::Result<()> {
    let rig = SensorRigSpec { true_t_o: 0.06, true_r_ir: [0.02, -0.03, 0.05], true_p_ir: [0.1, 0.05, -0.02], ..Default::default() };
    let data = generate(&TrajectorySpec::new(TrajectoryKind::FigureEight, 40.0), &rig)?;
    let events = merge_events(&data.imu, &data.scans, &[]);
    let out = run_threaded(PipelineConfig { calibration: CalibrationMode::ET, ..Default::default() }, &events)?;

    println!("{} published states, {} optimizer solves", out.trajectory.len(), out.reports.len());
    println!("{:?}", out.counters);
    let iters: usize = out.reports.iter().map(|r| r.iterations).sum();
    println!("mean LM iterations per solve {:.2}", iters as f64 / out.reports.len().max(1) as f64);
    if let Some(worst) = out.discontinuities.iter().map(|d| d.position).reduce(f64::max) {
        println!("largest navigator correction {:.4} m", worst);
    }
    let last = out.calibration.last().expect("calibration log");
    println!(
        "final t_O {:.1} ms (truth {:.1}), R_IR error {:.3} deg, p_IR error {:.1} mm",
        last.t_o * 1e3,
        rig.true_t_o * 1e3,
        last.r_ir.angle_to(&rig.r_ir()).to_degrees(),
        (last.p_ir - rig.p_ir()).norm() * 1e3
    );
    Ok(())
}
