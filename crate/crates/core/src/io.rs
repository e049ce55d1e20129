//! CSV and JSON-lines readers and writers for every stream the tools
//! exchange.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::StampedPose;
use crate::fgo::OptimizationReport;
use crate::geometry::{Pose, Rotation};
use crate::imu_preint::ImuSample;
use crate::pipeline::{CalibrationRecord, TrajectoryRecord};
use crate::radar_ego::{EgoVelMeasurement, RadarPoint, RadarScan};
use crate::sim::TruthSample;

fn reader(path: &Path) -> Result<csv::Reader<File>> {
    if !path.exists() {
        return Err(Error::MissingInput(path.to_path_buf()));
    }
    Ok(csv::Reader::from_path(path)?)
}

fn malformed(path: &Path, message: impl Into<String>) -> Error {
    Error::Malformed { what: path.display().to_string(), message: message.into() }
}

fn read_rows<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let mut rdr = reader(path)?;
    let mut out = Vec::new();
    for (i, row) in rdr.deserialize().enumerate() {
        out.push(row.map_err(|e| malformed(path, format!("row {}: {e}", i + 1)))?);
    }
    Ok(out)
}

fn write_rows<T: Serialize>(path: &Path, rows: impl IntoIterator<Item = T>) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Serialize, Deserialize)]
struct ImuRow {
    t: f64,
    ax: f64,
    ay: f64,
    az: f64,
    gx: f64,
    gy: f64,
    gz: f64,
}

pub fn write_imu(path: &Path, samples: &[ImuSample]) -> Result<()> {
    write_rows(
        path,
        samples.iter().map(|s| ImuRow {
            t: s.t,
            ax: s.accel.x,
            ay: s.accel.y,
            az: s.accel.z,
            gx: s.gyro.x,
            gy: s.gyro.y,
            gz: s.gyro.z,
        }),
    )
}

pub fn read_imu(path: &Path) -> Result<Vec<ImuSample>> {
    Ok(read_rows::<ImuRow>(path)?
        .into_iter()
        .map(|r| ImuSample::new(r.t, Vector3::new(r.ax, r.ay, r.az), Vector3::new(r.gx, r.gy, r.gz)))
        .collect())
}

#[derive(Serialize, Deserialize)]
struct PointRow {
    t: f64,
    x: f64,
    y: f64,
    z: f64,
    doppler: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    intensity: Option<f64>,
}

/// One row per point; the intensity column is written only when every
/// point carries one.
pub fn write_scans(path: &Path, scans: &[RadarScan]) -> Result<()> {
    let with_intensity = scans.iter().flat_map(|s| &s.points).all(|p| p.intensity.is_some());
    write_rows(
        path,
        scans.iter().flat_map(|s| {
            s.points.iter().map(move |p| PointRow {
                t: s.timestamp,
                x: p.position.x,
                y: p.position.y,
                z: p.position.z,
                doppler: p.doppler,
                intensity: if with_intensity { p.intensity } else { None },
            })
        }),
    )
}

/// Scans are delimited by timestamp changes. `flip_doppler` negates every
/// doppler for logs that use the opposite sign convention.
pub fn read_scans(path: &Path, flip_doppler: bool) -> Result<Vec<RadarScan>> {
    let sign = if flip_doppler { -1.0 } else { 1.0 };
    let mut scans: Vec<RadarScan> = Vec::new();
    for r in read_rows::<PointRow>(path)? {
        let point = RadarPoint { position: Vector3::new(r.x, r.y, r.z), doppler: sign * r.doppler, intensity: r.intensity };
        match scans.last_mut() {
            Some(s) if s.timestamp == r.t => s.points.push(point),
            _ => scans.push(RadarScan { timestamp: r.t, points: vec![point] }),
        }
    }
    Ok(scans)
}

#[derive(Serialize, Deserialize)]
struct EgoVelRow {
    t: f64,
    vx: f64,
    vy: f64,
    vz: f64,
    cov_xx: f64,
    cov_xy: f64,
    cov_xz: f64,
    cov_yx: f64,
    cov_yy: f64,
    cov_yz: f64,
    cov_zx: f64,
    cov_zy: f64,
    cov_zz: f64,
}

pub fn write_egovel(path: &Path, meas: &[EgoVelMeasurement]) -> Result<()> {
    write_rows(
        path,
        meas.iter().map(|m| {
            let c = &m.covariance;
            EgoVelRow {
                t: m.timestamp,
                vx: m.velocity.x,
                vy: m.velocity.y,
                vz: m.velocity.z,
                cov_xx: c[(0, 0)],
                cov_xy: c[(0, 1)],
                cov_xz: c[(0, 2)],
                cov_yx: c[(1, 0)],
                cov_yy: c[(1, 1)],
                cov_yz: c[(1, 2)],
                cov_zx: c[(2, 0)],
                cov_zy: c[(2, 1)],
                cov_zz: c[(2, 2)],
            }
        }),
    )
}

/// The format carries no inlier count; it is read back as zero.
pub fn read_egovel(path: &Path) -> Result<Vec<EgoVelMeasurement>> {
    Ok(read_rows::<EgoVelRow>(path)?
        .into_iter()
        .map(|r| EgoVelMeasurement {
            timestamp: r.t,
            velocity: Vector3::new(r.vx, r.vy, r.vz),
            covariance: Matrix3::new(r.cov_xx, r.cov_xy, r.cov_xz, r.cov_yx, r.cov_yy, r.cov_yz, r.cov_zx, r.cov_zy, r.cov_zz),
            inlier_count: 0,
        })
        .collect())
}

#[derive(Serialize, Deserialize)]
struct PoseRow {
    t: f64,
    px: f64,
    py: f64,
    pz: f64,
    qw: f64,
    qx: f64,
    qy: f64,
    qz: f64,
    vx: f64,
    vy: f64,
    vz: f64,
}

impl PoseRow {
    fn new(t: f64, pose: &Pose, v: &Vector3<f64>) -> Self {
        let q = pose.rotation.to_quaternion();
        let p = pose.translation;
        Self { t, px: p.x, py: p.y, pz: p.z, qw: q[0], qx: q[1], qy: q[2], qz: q[3], vx: v.x, vy: v.y, vz: v.z }
    }

    fn pose(&self) -> Result<Pose> {
        Ok(Pose::new(Rotation::from_quaternion([self.qw, self.qx, self.qy, self.qz])?, Vector3::new(self.px, self.py, self.pz)))
    }
}

/// Reference trajectory record.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TruthRecord {
    pub t: f64,
    pub pose: Pose,
    pub velocity: Vector3<f64>,
}

pub fn write_truth(path: &Path, samples: &[TruthSample]) -> Result<()> {
    write_rows(path, samples.iter().map(|s| PoseRow::new(s.t, &Pose::new(s.r_wi, s.p_w), &s.v_w)))
}

pub fn read_truth(path: &Path) -> Result<Vec<TruthRecord>> {
    read_rows::<PoseRow>(path)?
        .into_iter()
        .map(|r| Ok(TruthRecord { t: r.t, pose: r.pose()?, velocity: Vector3::new(r.vx, r.vy, r.vz) }))
        .collect()
}

#[derive(Serialize, Deserialize)]
struct TrajectoryRow {
    t: f64,
    px: f64,
    py: f64,
    pz: f64,
    qw: f64,
    qx: f64,
    qy: f64,
    qz: f64,
    vx: f64,
    vy: f64,
    vz: f64,
    #[serde(rename = "t_O")]
    t_o: f64,
    /// `R_IR` as a rotation vector.
    rx: f64,
    ry: f64,
    rz: f64,
    px_ir: f64,
    py_ir: f64,
    pz_ir: f64,
}

pub fn write_trajectory(path: &Path, records: &[TrajectoryRecord]) -> Result<()> {
    write_rows(
        path,
        records.iter().map(|r| {
            let b = PoseRow::new(r.t, &r.pose, &r.velocity);
            let phi = r.r_ir.log();
            TrajectoryRow {
                t: r.t,
                px: b.px,
                py: b.py,
                pz: b.pz,
                qw: b.qw,
                qx: b.qx,
                qy: b.qy,
                qz: b.qz,
                vx: b.vx,
                vy: b.vy,
                vz: b.vz,
                t_o: r.t_o,
                rx: phi.x,
                ry: phi.y,
                rz: phi.z,
                px_ir: r.p_ir.x,
                py_ir: r.p_ir.y,
                pz_ir: r.p_ir.z,
            }
        }),
    )
}

pub fn read_trajectory(path: &Path) -> Result<Vec<TrajectoryRecord>> {
    read_rows::<TrajectoryRow>(path)?
        .into_iter()
        .map(|r| {
            Ok(TrajectoryRecord {
                t: r.t,
                pose: Pose::new(Rotation::from_quaternion([r.qw, r.qx, r.qy, r.qz])?, Vector3::new(r.px, r.py, r.pz)),
                velocity: Vector3::new(r.vx, r.vy, r.vz),
                t_o: r.t_o,
                r_ir: Rotation::exp(&Vector3::new(r.rx, r.ry, r.rz)),
                p_ir: Vector3::new(r.px_ir, r.py_ir, r.pz_ir),
            })
        })
        .collect()
}

/// Poses of an estimate or reference file, whichever layout it uses.
pub fn read_poses(path: &Path) -> Result<Vec<StampedPose>> {
    let mut rdr = reader(path)?;
    let headers = rdr.headers()?.clone();
    if headers.iter().any(|h| h == "t_O") {
        Ok(read_trajectory(path)?.into_iter().map(|r| StampedPose::new(r.t, r.pose)).collect())
    } else {
        Ok(read_truth(path)?.into_iter().map(|r| StampedPose::new(r.t, r.pose)).collect())
    }
}

#[derive(Serialize, Deserialize)]
struct CalibrationRow {
    t: f64,
    #[serde(rename = "t_O")]
    t_o: f64,
    /// Rotation angle of `R_IR`.
    ext_rot_deg: f64,
    /// Norm of `p_IR`.
    ext_trans_m: f64,
    rx: f64,
    ry: f64,
    rz: f64,
    px_ir: f64,
    py_ir: f64,
    pz_ir: f64,
}

/// Convergence log. The first four columns summarize the estimate; the
/// remaining ones carry the full extrinsics so the file can be re-injected.
pub fn write_calibration(path: &Path, records: &[CalibrationRecord]) -> Result<()> {
    write_rows(
        path,
        records.iter().map(|r| {
            let phi = r.r_ir.log();
            CalibrationRow {
                t: r.t,
                t_o: r.t_o,
                ext_rot_deg: phi.norm().to_degrees(),
                ext_trans_m: r.p_ir.norm(),
                rx: phi.x,
                ry: phi.y,
                rz: phi.z,
                px_ir: r.p_ir.x,
                py_ir: r.p_ir.y,
                pz_ir: r.p_ir.z,
            }
        }),
    )
}

pub fn read_calibration(path: &Path) -> Result<Vec<CalibrationRecord>> {
    Ok(read_rows::<CalibrationRow>(path)?
        .into_iter()
        .map(|r| CalibrationRecord {
            t: r.t,
            t_o: r.t_o,
            r_ir: Rotation::exp(&Vector3::new(r.rx, r.ry, r.rz)),
            p_ir: Vector3::new(r.px_ir, r.py_ir, r.pz_ir),
        })
        .collect())
}

/// One JSON object per line.
pub fn write_json_lines<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_reports(path: &Path) -> Result<Vec<OptimizationReport>> {
    if !path.exists() {
        return Err(Error::MissingInput(path.to_path_buf()));
    }
    let mut out = Vec::new();
    for line in BufReader::new(File::open(path)?).lines() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}
