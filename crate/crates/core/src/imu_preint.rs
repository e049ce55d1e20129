//! IMU preintegration between keyframes and stationary initialization.
//!
//! Conventions: world z is up and `g_W = (0, 0, −g)`. The accelerometer
//! measures `R_IW·(a_W − g_W) + b_a`. Deltas are expressed in the IMU frame
//! at the start of the interval, following the usual on-manifold
//! formulation; rotations are perturbed on the right.

use nalgebra::{Matrix3, SMatrix, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{right_jacobian, skew, Rotation};

pub type Matrix9 = SMatrix<f64, 9, 9>;
pub type Matrix9x6 = SMatrix<f64, 9, 6>;
type Matrix15 = SMatrix<f64, 15, 15>;

const COVARIANCE_JITTER: f64 = 1e-18;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ImuSample {
    pub t: f64,
    /// Raw specific force, m/s².
    pub accel: Vector3<f64>,
    /// Raw angular rate, rad/s.
    pub gyro: Vector3<f64>,
}

impl ImuSample {
    pub fn new(t: f64, accel: Vector3<f64>, gyro: Vector3<f64>) -> Self {
        Self { t, accel, gyro }
    }

    pub fn lerp(&self, other: &ImuSample, t: f64) -> ImuSample {
        let a = if other.t > self.t { (t - self.t) / (other.t - self.t) } else { 0.0 };
        ImuSample {
            t,
            accel: self.accel + (other.accel - self.accel) * a,
            gyro: self.gyro + (other.gyro - self.gyro) * a,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ImuNoiseModel {
    /// rad/s/√Hz
    pub gyro_noise_density: f64,
    /// m/s²/√Hz
    pub accel_noise_density: f64,
    /// rad/s²/√Hz
    pub gyro_bias_walk: f64,
    /// m/s³/√Hz
    pub accel_bias_walk: f64,
    pub gravity_magnitude: f64,
}

impl Default for ImuNoiseModel {
    fn default() -> Self {
        Self {
            gyro_noise_density: 0.005,
            accel_noise_density: 0.02,
            gyro_bias_walk: 1e-5,
            accel_bias_walk: 1e-4,
            gravity_magnitude: 9.80665,
        }
    }
}

impl ImuNoiseModel {
    pub fn gravity(&self) -> Vector3<f64> {
        Vector3::new(0.0, 0.0, -self.gravity_magnitude)
    }

    pub fn validate(&self) -> Result<()> {
        let all = [
            self.gyro_noise_density,
            self.accel_noise_density,
            self.gyro_bias_walk,
            self.accel_bias_walk,
            self.gravity_magnitude,
        ];
        if all.iter().all(|v| v.is_finite() && *v > 0.0) {
            Ok(())
        } else {
            Err(Error::Config { path: "imu_noise".into(), message: "all noise parameters must be positive".into() })
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ImuBias {
    pub gyro: Vector3<f64>,
    pub accel: Vector3<f64>,
}

impl ImuBias {
    pub fn new(gyro: Vector3<f64>, accel: Vector3<f64>) -> Self {
        Self { gyro, accel }
    }
}

/// Relative motion between two keyframes, linearized in the biases.
#[derive(Debug, Clone)]
pub struct PreintegratedImu {
    pub dt_total: f64,
    pub delta_r: Rotation,
    pub delta_v: Vector3<f64>,
    pub delta_p: Vector3<f64>,
    /// Covariance of `(δθ, δv, δp)`.
    pub covariance: Matrix9,
    /// `∂(ΔR, Δv, Δp)/∂(b_g, b_a)`.
    pub bias_jacobians: Matrix9x6,
    pub bias_linearization_point: ImuBias,
    /// Samples the deltas were built from, kept for re-preintegration.
    pub samples: Vec<ImuSample>,
}

/// Preintegrates `samples` (which must span the keyframe interval exactly)
/// with midpoint integration.
pub fn preintegrate(samples: &[ImuSample], bias: ImuBias, noise: &ImuNoiseModel) -> Result<PreintegratedImu> {
    if samples.len() < 2 {
        return Err(Error::TooFewSamples { needed: 2, got: samples.len() });
    }
    for (i, w) in samples.windows(2).enumerate() {
        if !(w[1].t > w[0].t) {
            return Err(Error::NonMonotone { index: i + 1, prev: w[0].t, next: w[1].t });
        }
    }
    let mut r = Rotation::identity();
    let mut v = Vector3::zeros();
    let mut p = Vector3::zeros();
    let mut cov = Matrix9::zeros();
    // full 15×15 error-state transition from the start of the interval
    let mut jac = Matrix15::identity();
    let sg2 = noise.gyro_noise_density.powi(2);
    let sa2 = noise.accel_noise_density.powi(2);

    for w in samples.windows(2) {
        let (s0, s1) = (&w[0], &w[1]);
        let dt = s1.t - s0.t;
        let omega = 0.5 * (s0.gyro + s1.gyro) - bias.gyro;
        let step = omega * dt;
        let d_r = Rotation::exp(&step);
        let r1 = r * d_r;
        let a0 = s0.accel - bias.accel;
        let a1 = s1.accel - bias.accel;
        let a_mid = 0.5 * (r * a0 + r1 * a1);

        let r0m = *r.matrix();
        let r1m = *r1.matrix();
        let jr = right_jacobian(&step);
        let d_rt = d_r.matrix().transpose();
        let da_dth = -0.5 * (r0m * skew(&a0) + r1m * skew(&a1) * d_rt);
        let da_dbg = 0.5 * r1m * skew(&a1) * jr * dt;
        let da_dba = -0.5 * (r0m + r1m);

        let mut f = Matrix15::identity();
        f.fixed_view_mut::<3, 3>(0, 0).copy_from(&d_rt);
        f.fixed_view_mut::<3, 3>(0, 9).copy_from(&(-jr * dt));
        // velocity rows
        f.fixed_view_mut::<3, 3>(3, 0).copy_from(&(da_dth * dt));
        f.fixed_view_mut::<3, 3>(3, 9).copy_from(&(da_dbg * dt));
        f.fixed_view_mut::<3, 3>(3, 12).copy_from(&(da_dba * dt));
        // position rows
        let half = 0.5 * dt * dt;
        f.fixed_view_mut::<3, 3>(6, 0).copy_from(&(da_dth * half));
        f.fixed_view_mut::<3, 3>(6, 3).copy_from(&(Matrix3::identity() * dt));
        f.fixed_view_mut::<3, 3>(6, 9).copy_from(&(da_dbg * half));
        f.fixed_view_mut::<3, 3>(6, 12).copy_from(&(da_dba * half));

        // noise inputs: gyro (through θ₁) and accelerometer (through a_mid)
        let mut g = SMatrix::<f64, 9, 6>::zeros();
        g.fixed_view_mut::<3, 3>(0, 0).copy_from(&(-jr * dt));
        g.fixed_view_mut::<3, 3>(3, 0).copy_from(&(da_dbg * dt));
        g.fixed_view_mut::<3, 3>(6, 0).copy_from(&(da_dbg * half));
        g.fixed_view_mut::<3, 3>(3, 3).copy_from(&(-da_dba * dt));
        g.fixed_view_mut::<3, 3>(6, 3).copy_from(&(-da_dba * half));
        let mut q = SMatrix::<f64, 6, 6>::zeros();
        for i in 0..3 {
            q[(i, i)] = sg2 / dt;
            q[(i + 3, i + 3)] = sa2 / dt;
        }
        let f9 = f.fixed_view::<9, 9>(0, 0).into_owned();
        cov = f9 * cov * f9.transpose() + g * q * g.transpose();
        jac = f * jac;

        p += v * dt + a_mid * half;
        v += a_mid * dt;
        r = r1;
    }
    // a single step only excites six noise directions
    cov = 0.5 * (cov + cov.transpose()) + Matrix9::identity() * COVARIANCE_JITTER;

    Ok(PreintegratedImu {
        dt_total: samples[samples.len() - 1].t - samples[0].t,
        delta_r: r,
        delta_v: v,
        delta_p: p,
        covariance: cov,
        bias_jacobians: jac.fixed_view::<9, 6>(0, 9).into_owned(),
        bias_linearization_point: bias,
        samples: samples.to_vec(),
    })
}

impl PreintegratedImu {
    pub fn j_r_bg(&self) -> Matrix3<f64> {
        self.bias_jacobians.fixed_view::<3, 3>(0, 0).into_owned()
    }
    pub fn j_v_bg(&self) -> Matrix3<f64> {
        self.bias_jacobians.fixed_view::<3, 3>(3, 0).into_owned()
    }
    pub fn j_v_ba(&self) -> Matrix3<f64> {
        self.bias_jacobians.fixed_view::<3, 3>(3, 3).into_owned()
    }
    pub fn j_p_bg(&self) -> Matrix3<f64> {
        self.bias_jacobians.fixed_view::<3, 3>(6, 0).into_owned()
    }
    pub fn j_p_ba(&self) -> Matrix3<f64> {
        self.bias_jacobians.fixed_view::<3, 3>(6, 3).into_owned()
    }

    /// First-order bias-corrected deltas `(ΔR, Δv, Δp)`.
    pub fn corrected(&self, bias: &ImuBias) -> (Rotation, Vector3<f64>, Vector3<f64>) {
        let dbg = bias.gyro - self.bias_linearization_point.gyro;
        let dba = bias.accel - self.bias_linearization_point.accel;
        (
            self.delta_r * Rotation::exp(&(self.j_r_bg() * dbg)),
            self.delta_v + self.j_v_bg() * dbg + self.j_v_ba() * dba,
            self.delta_p + self.j_p_bg() * dbg + self.j_p_ba() * dba,
        )
    }

    /// Distance of `bias` from the linearization point (max of both norms).
    pub fn bias_deviation(&self, bias: &ImuBias) -> f64 {
        let d = &self.bias_linearization_point;
        (bias.gyro - d.gyro).norm().max((bias.accel - d.accel).norm())
    }

    pub fn repreintegrate(&self, bias: ImuBias, noise: &ImuNoiseModel) -> Result<PreintegratedImu> {
        preintegrate(&self.samples, bias, noise)
    }

    /// Concatenation `self` then `next` (deltas only).
    pub fn compose(&self, next: &PreintegratedImu) -> (Rotation, Vector3<f64>, Vector3<f64>) {
        let r = self.delta_r * next.delta_r;
        let v = self.delta_v + self.delta_r * next.delta_v;
        let p = self.delta_p + self.delta_v * next.dt_total + self.delta_r * next.delta_p;
        (r, v, p)
    }
}

/// Samples covering exactly `[t0, t1]`, with linearly interpolated endpoints.
pub fn samples_between(samples: &[ImuSample], t0: f64, t1: f64) -> Vec<ImuSample> {
    let mut out = Vec::new();
    if samples.is_empty() || !(t1 > t0) {
        return out;
    }
    let start = samples.partition_point(|s| s.t < t0);
    let end = samples.partition_point(|s| s.t <= t1);
    if start > 0 && start < samples.len() && samples[start].t > t0 {
        out.push(samples[start - 1].lerp(&samples[start], t0));
    } else if start == 0 && samples[0].t > t0 {
        // no data before t0: hold the first sample
        out.push(ImuSample { t: t0, ..samples[0] });
    }
    out.extend_from_slice(&samples[start..end]);
    let last_t = out.last().map(|s| s.t).unwrap_or(f64::NEG_INFINITY);
    if last_t < t1 {
        if end < samples.len() && end > 0 {
            out.push(samples[end - 1].lerp(&samples[end], t1));
        } else if let Some(last) = samples.last() {
            out.push(ImuSample { t: t1, ..*last });
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StationaryInit {
    pub gyro_bias: Vector3<f64>,
    pub roll: f64,
    pub pitch: f64,
}

impl StationaryInit {
    /// Attitude with zero yaw.
    pub fn orientation_wi(&self) -> Rotation {
        Rotation::from_euler_zyx(0.0, self.pitch, self.roll)
    }
}

/// Gyro bias and roll/pitch from the first `duration` seconds of `samples`.
pub fn stationary_init(samples: &[ImuSample], duration: f64, noise: &ImuNoiseModel) -> Result<StationaryInit> {
    let Some(first) = samples.first() else {
        return Err(Error::TooFewSamples { needed: 2, got: 0 });
    };
    let window: Vec<&ImuSample> = samples.iter().take_while(|s| s.t <= first.t + duration).collect();
    if window.len() < 2 {
        return Err(Error::TooFewSamples { needed: 2, got: window.len() });
    }
    let n = window.len() as f64;
    let span = window[window.len() - 1].t - window[0].t;
    let rate = (n - 1.0) / span;
    let mean_g = window.iter().map(|s| s.gyro).sum::<Vector3<f64>>() / n;
    let mean_a = window.iter().map(|s| s.accel).sum::<Vector3<f64>>() / n;
    let var = |f: &dyn Fn(&ImuSample) -> Vector3<f64>, mean: &Vector3<f64>| {
        window.iter().map(|s| (f(s) - mean).component_mul(&(f(s) - mean))).sum::<Vector3<f64>>() / (n - 1.0)
    };
    let var_g = var(&|s| s.gyro, &mean_g).max();
    let var_a = var(&|s| s.accel, &mean_a).max();
    let gate_g = (3.0 * noise.gyro_noise_density * rate.sqrt()).powi(2);
    let gate_a = (3.0 * noise.accel_noise_density * rate.sqrt()).powi(2);
    if var_g > gate_g {
        return Err(Error::InitRefused(format!("gyro variance {var_g:.3e} exceeds {gate_g:.3e}")));
    }
    if var_a > gate_a {
        return Err(Error::InitRefused(format!("accelerometer variance {var_a:.3e} exceeds {gate_a:.3e}")));
    }
    // static: a = R_IW·(0, 0, g) = g·(−sin θ, sin φ cos θ, cos φ cos θ)
    let roll = mean_a.y.atan2(mean_a.z);
    let pitch = (-mean_a.x).atan2((mean_a.y * mean_a.y + mean_a.z * mean_a.z).sqrt());
    Ok(StationaryInit { gyro_bias: mean_g, roll, pitch })
}
