//! Trajectory accuracy: APE after rigid alignment, RPE over fixed path
//! lengths, and calibration error summaries.

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{umeyama_align, Pose, Rotation};
use crate::pipeline::TrajectoryRecord;
use crate::sim::TruthSample;

/// Default association tolerance, seconds.
pub const MAX_MATCH_GAP: f64 = 0.01;
/// Default RPE interval along the reference path, metres.
pub const RPE_INTERVAL: f64 = 10.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StampedPose {
    pub t: f64,
    pub pose: Pose,
}

impl StampedPose {
    pub fn new(t: f64, pose: Pose) -> Self {
        Self { t, pose }
    }
}

impl From<&TrajectoryRecord> for StampedPose {
    fn from(r: &TrajectoryRecord) -> Self {
        Self::new(r.t, r.pose)
    }
}

impl From<&TruthSample> for StampedPose {
    fn from(s: &TruthSample) -> Self {
        Self::new(s.t, Pose::new(s.r_wi, s.p_w))
    }
}

/// Estimate matched with the reference pose at the same instant.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PosePair {
    pub t: f64,
    pub estimate: Pose,
    pub reference: Pose,
}

/// Reference pose at `t`, interpolated between the bracketing samples.
fn interpolate(reference: &[StampedPose], t: f64, max_gap: f64) -> Option<Pose> {
    let j = reference.partition_point(|p| p.t < t);
    if j < reference.len() && reference[j].t == t {
        return Some(reference[j].pose);
    }
    if j == 0 || j == reference.len() {
        return None;
    }
    let (a, b) = (&reference[j - 1], &reference[j]);
    if (t - a.t).min(b.t - t) > max_gap {
        return None;
    }
    let alpha = (t - a.t) / (b.t - a.t);
    Some(Pose::new(
        a.pose.rotation.interpolate(&b.pose.rotation, alpha),
        a.pose.translation + (b.pose.translation - a.pose.translation) * alpha,
    ))
}

/// Pairs every estimate stamp that falls within `max_gap` of a reference
/// sample with the interpolated reference pose.
pub fn associate(estimate: &[StampedPose], reference: &[StampedPose], max_gap: f64) -> Result<Vec<PosePair>> {
    for (name, seq) in [("estimate", estimate), ("reference", reference)] {
        if let Some(i) = seq.windows(2).position(|w| !(w[1].t > w[0].t)) {
            return Err(Error::Malformed {
                what: format!("{name} trajectory"),
                message: format!("timestamps not increasing at row {}", i + 1),
            });
        }
    }
    let pairs: Vec<PosePair> = estimate
        .iter()
        .filter_map(|e| interpolate(reference, e.t, max_gap).map(|r| PosePair { t: e.t, estimate: e.pose, reference: r }))
        .collect();
    if pairs.is_empty() {
        return Err(Error::EmptyOverlap);
    }
    Ok(pairs)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairError {
    pub t: f64,
    pub trans: f64,
    pub rot_deg: f64,
}

fn pose_error(estimate: &Pose, reference: &Pose) -> (f64, f64) {
    let trans = (estimate.translation - reference.translation).norm();
    (trans, estimate.rotation.angle_to(&reference.rotation).to_degrees())
}

/// Per-pair APE after aligning the estimate onto the reference.
pub fn ape_errors(pairs: &[PosePair]) -> Result<Vec<PairError>> {
    let est: Vec<Pose> = pairs.iter().map(|p| p.estimate).collect();
    let reference: Vec<Pose> = pairs.iter().map(|p| p.reference).collect();
    let align = umeyama_align(&est, &reference)?;
    Ok(pairs
        .iter()
        .map(|p| {
            let (trans, rot_deg) = pose_error(&align.compose(&p.estimate), &p.reference);
            PairError { t: p.t, trans, rot_deg }
        })
        .collect())
}

/// Mean APE (translation m, rotation deg).
pub fn ape(pairs: &[PosePair]) -> Result<(f64, f64)> {
    let errs = ape_errors(pairs)?;
    Ok(mean(&errs))
}

fn mean(errs: &[PairError]) -> (f64, f64) {
    let n = errs.len().max(1) as f64;
    (errs.iter().map(|e| e.trans).sum::<f64>() / n, errs.iter().map(|e| e.rot_deg).sum::<f64>() / n)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RpeResult {
    pub trans_mean: f64,
    pub rot_mean: f64,
    pub count: usize,
    /// No start pose had a partner a full interval further along the path.
    pub empty: bool,
}

/// Mean relative pose error over segments of `interval` metres of
/// reference path.
pub fn rpe(pairs: &[PosePair], interval: f64) -> RpeResult {
    let mut length = Vec::with_capacity(pairs.len());
    let mut acc = 0.0;
    for (k, p) in pairs.iter().enumerate() {
        if k > 0 {
            acc += (p.reference.translation - pairs[k - 1].reference.translation).norm();
        }
        length.push(acc);
    }
    let mut errs = Vec::new();
    let mut j = 0;
    for i in 0..pairs.len() {
        j = j.max(i + 1);
        // path lengths accumulate round-off; an interval hit to 1e-9 counts
        while j < pairs.len() && length[j] - length[i] < interval * (1.0 - 1e-9) {
            j += 1;
        }
        if j == pairs.len() {
            break;
        }
        let rel_e = pairs[i].estimate.between(&pairs[j].estimate);
        let rel_r = pairs[i].reference.between(&pairs[j].reference);
        let err = rel_r.between(&rel_e);
        errs.push(PairError { t: pairs[i].t, trans: err.translation.norm(), rot_deg: err.rotation.angle().to_degrees() });
    }
    if errs.is_empty() {
        return RpeResult { trans_mean: 0.0, rot_mean: 0.0, count: 0, empty: true };
    }
    let (trans_mean, rot_mean) = mean(&errs);
    RpeResult { trans_mean, rot_mean, count: errs.len(), empty: false }
}

/// True calibration, when known (simulated data).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CalibrationTruth {
    pub t_o: f64,
    pub r_ir: Rotation,
    pub p_ir: Vector3<f64>,
}

/// Final calibration estimate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CalibrationEstimate {
    pub t_o: f64,
    pub r_ir: Rotation,
    pub p_ir: Vector3<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub ape_trans_mean: f64,
    pub ape_rot_mean: f64,
    pub rpe_trans_mean: f64,
    pub rpe_rot_mean: f64,
    pub rpe_empty: bool,
    pub t_o_final_error: Option<f64>,
    pub ext_rot_error: Option<f64>,
    pub ext_trans_error: Option<f64>,
    pub pair_count: usize,
    pub rpe_count: usize,
}

/// Full evaluation of one run; returns the report and per-pair APE.
pub fn evaluate(
    estimate: &[StampedPose],
    reference: &[StampedPose],
    calibration: Option<(CalibrationEstimate, CalibrationTruth)>,
) -> Result<(EvalReport, Vec<PairError>)> {
    let pairs = associate(estimate, reference, MAX_MATCH_GAP)?;
    let errs = ape_errors(&pairs)?;
    let (ape_trans_mean, ape_rot_mean) = mean(&errs);
    let r = rpe(&pairs, RPE_INTERVAL);
    let (t_o, rot, trans) = match calibration {
        Some((e, t)) => (
            Some((e.t_o - t.t_o).abs()),
            Some(e.r_ir.angle_to(&t.r_ir).to_degrees()),
            Some((e.p_ir - t.p_ir).norm()),
        ),
        None => (None, None, None),
    };
    let report = EvalReport {
        ape_trans_mean,
        ape_rot_mean,
        rpe_trans_mean: r.trans_mean,
        rpe_rot_mean: r.rot_mean,
        rpe_empty: r.empty,
        t_o_final_error: t_o,
        ext_rot_error: rot,
        ext_trans_error: trans,
        pair_count: pairs.len(),
        rpe_count: r.count,
    };
    Ok((report, errs))
}
