//! Instantaneous ego-velocity from a single Doppler point cloud.
//!
//! Static targets satisfy `d = −r̂ᵀ v` where `r̂` is the unit direction to the
//! target and `v` the sensor velocity, both in the radar frame. Approaching
//! targets therefore report negative Doppler.

use std::collections::VecDeque;

use nalgebra::{Matrix3, SymmetricEigen, Vector3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Lower bound on each covariance eigenvalue, (m/s)².
pub const COVARIANCE_FLOOR: f64 = 1e-4;

/// Direction matrices whose eigenvalue ratio falls below this are rank deficient.
const RANK_RATIO: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RadarPoint {
    pub position: Vector3<f64>,
    pub doppler: f64,
    pub intensity: Option<f64>,
}

impl RadarPoint {
    pub fn new(position: Vector3<f64>, doppler: f64) -> Self {
        Self { position, doppler, intensity: None }
    }

    pub fn direction(&self) -> Vector3<f64> {
        self.position / self.position.norm()
    }

    /// Doppler residual `d + r̂ᵀv` for a candidate velocity.
    pub fn residual(&self, v: &Vector3<f64>) -> f64 {
        self.doppler + self.direction().dot(v)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RadarScan {
    /// Radar clock, seconds.
    pub timestamp: f64,
    pub points: Vec<RadarPoint>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EgoVelMeasurement {
    /// Radar clock, seconds.
    pub timestamp: f64,
    /// Radar-frame velocity, m/s.
    pub velocity: Vector3<f64>,
    pub covariance: Matrix3<f64>,
    pub inlier_count: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RansacConfig {
    pub inlier_threshold: f64,
    pub max_iters: usize,
    pub min_inlier_ratio: f64,
    pub seed: u64,
}

impl Default for RansacConfig {
    fn default() -> Self {
        Self { inlier_threshold: 0.15, max_iters: 100, min_inlier_ratio: 0.25, seed: 7 }
    }
}

/// Least-squares velocity from at least three points.
///
/// The covariance is `σ̂²(AᵀA)⁻¹` with the residual variance `σ̂²` estimated
/// from the fit (zero for exactly determined problems).
pub fn solve_lsq(points: &[RadarPoint]) -> Result<(Vector3<f64>, Matrix3<f64>)> {
    if points.len() < 3 {
        return Err(Error::TooFewSamples { needed: 3, got: points.len() });
    }
    let mut ata = Matrix3::zeros();
    let mut atb = Vector3::zeros();
    for p in points {
        if !(p.position.norm() > 0.0) {
            return Err(Error::Degenerate("radar point at the sensor origin".into()));
        }
        let r = p.direction();
        ata += r * r.transpose();
        atb -= r * p.doppler;
    }
    let eig = SymmetricEigen::new(ata);
    let (lo, hi) = (eig.eigenvalues.min(), eig.eigenvalues.max());
    let ratio = if hi > 0.0 { lo / hi } else { 0.0 };
    if ratio < RANK_RATIO {
        return Err(Error::UnobservableAxis { ratio });
    }
    let inv = eig.eigenvectors * Matrix3::from_diagonal(&eig.eigenvalues.map(|l| 1.0 / l)) * eig.eigenvectors.transpose();
    let v = inv * atb;
    let dof = points.len() as f64 - 3.0;
    let sigma2 = if dof > 0.0 { points.iter().map(|p| p.residual(&v).powi(2)).sum::<f64>() / dof } else { 0.0 };
    Ok((v, inv * sigma2))
}

/// Clamp eigenvalues of a symmetric matrix from below.
pub fn floor_covariance(cov: &Matrix3<f64>, floor: f64) -> Matrix3<f64> {
    let sym = 0.5 * (cov + cov.transpose());
    let eig = SymmetricEigen::new(sym);
    let d = eig.eigenvalues.map(|l| l.max(floor));
    eig.eigenvectors * Matrix3::from_diagonal(&d) * eig.eigenvectors.transpose()
}

/// Per-scan random source: the configured seed mixed with the scan stamp, so
/// scans are independent of processing order.
fn scan_rng(seed: u64, timestamp: f64) -> ChaCha8Rng {
    let mixed = seed ^ timestamp.to_bits().rotate_left(17) ^ 0x9e37_79b9_7f4a_7c15;
    ChaCha8Rng::seed_from_u64(mixed)
}

fn consensus(points: &[RadarPoint], v: &Vector3<f64>, threshold: f64) -> Vec<usize> {
    (0..points.len()).filter(|&j| points[j].residual(v).abs() < threshold).collect()
}

/// RANSAC over minimal three-point solves, then a refit on the consensus set.
pub fn estimate_ransac(scan: &RadarScan, config: &RansacConfig) -> Result<EgoVelMeasurement> {
    let pts = &scan.points;
    let n = pts.len();
    if n < 3 {
        return Err(Error::TooFewSamples { needed: 3, got: n });
    }
    let mut rng = scan_rng(config.seed, scan.timestamp);
    let mut best: Vec<usize> = Vec::new();
    for _ in 0..config.max_iters.max(1) {
        let idx = rand::seq::index::sample(&mut rng, n, 3);
        let sample: Vec<RadarPoint> = idx.iter().map(|i| pts[i]).collect();
        let Ok((v, _)) = solve_lsq(&sample) else { continue };
        let inliers = consensus(pts, &v, config.inlier_threshold);
        if inliers.len() > best.len() {
            best = inliers;
            if best.len() == n {
                break;
            }
        }
    }
    if best.len() < 3 {
        // every minimal sample was degenerate; fall back to the full set
        return match solve_lsq(pts) {
            Err(e @ Error::UnobservableAxis { .. }) => Err(e),
            _ => Err(Error::EgoVelocityRejected(format!("no consensus at t={}", scan.timestamp))),
        };
    }
    let ratio = best.len() as f64 / n as f64;
    if ratio < config.min_inlier_ratio {
        return Err(Error::EgoVelocityRejected(format!(
            "consensus ratio {ratio:.2} below {:.2} at t={}",
            config.min_inlier_ratio, scan.timestamp
        )));
    }
    let subset: Vec<RadarPoint> = best.iter().map(|&j| pts[j]).collect();
    let (velocity, covariance) = solve_lsq(&subset)?;
    Ok(EgoVelMeasurement {
        timestamp: scan.timestamp,
        velocity,
        covariance: floor_covariance(&covariance, COVARIANCE_FLOOR),
        inlier_count: best.len(),
    })
}

/// Rejects velocities far from the trailing mean of recently accepted ones.
#[derive(Debug, Clone)]
pub struct RaveGate {
    history: VecDeque<Vector3<f64>>,
    capacity: usize,
    max_deviation: f64,
}

impl Default for RaveGate {
    fn default() -> Self {
        Self::new(5, 5.0)
    }
}

impl RaveGate {
    pub fn new(capacity: usize, max_deviation: f64) -> Self {
        Self { history: VecDeque::with_capacity(capacity), capacity: capacity.max(1), max_deviation }
    }

    /// Returns whether `v` is accepted; accepted values join the history.
    pub fn admit(&mut self, v: &Vector3<f64>) -> bool {
        if !self.history.is_empty() {
            let mean = self.history.iter().sum::<Vector3<f64>>() / self.history.len() as f64;
            if (v - mean).norm() > self.max_deviation {
                return false;
            }
        }
        if self.history.len() == self.capacity {
            self.history.pop_front();
        }
        self.history.push_back(*v);
        true
    }
}
