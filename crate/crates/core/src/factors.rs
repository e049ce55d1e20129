//! Residuals and Jacobians for the factors of the sliding-window graph.
//!
//! Every keyframe state has a 22-dimensional tangent space laid out as
//! `[θ, p, v, b_g, b_a, θ_IR, p_IR, t_O]`. The body attitude is perturbed on
//! the right of `R_WI = R_IWᵀ`, so `R_IW ⊞ δ = Exp(−δ)·R_IW`; the extrinsic
//! rotation is perturbed on the right of `R_IR`. All other blocks are
//! additive, with position and velocity in the world frame.
//!
//! Temporal offset: a radar measurement stamped `t` describes the platform
//! at IMU time `t − t_O`. The radar factor integrates the spline models over
//! the signed interval `[t, t − t_O]`.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector, Matrix3, SVector, Vector3};
use serde::{Deserialize, Serialize};

use crate::bspline::{SplineFitConfig, UniformCubicSpline};
use crate::error::{Error, Result};
use crate::geometry::{right_jacobian, right_jacobian_inv, skew, Rotation};
use crate::imu_preint::{ImuBias, ImuNoiseModel, ImuSample, PreintegratedImu};
use crate::radar_ego::EgoVelMeasurement;

pub const TANGENT_DIM: usize = 22;
pub const ROT: usize = 0;
pub const POS: usize = 3;
pub const VEL: usize = 6;
pub const BG: usize = 9;
pub const BA: usize = 12;
pub const EXT_ROT: usize = 15;
pub const EXT_POS: usize = 18;
pub const OFFSET: usize = 21;

pub type Tangent = SVector<f64, TANGENT_DIM>;

/// Bias deviation beyond which the first-order correction is not trusted.
pub const REPREINTEGRATION_THRESHOLD: f64 = 0.1;

/// Finite-difference step for the radar factor Jacobians.
pub const RADAR_FD_STEP: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NavState {
    /// IMU clock, seconds.
    pub t: f64,
    pub r_iw: Rotation,
    pub p_wi: Vector3<f64>,
    pub v_w: Vector3<f64>,
    pub b_g: Vector3<f64>,
    pub b_a: Vector3<f64>,
    pub r_ir: Rotation,
    pub p_ir: Vector3<f64>,
    pub t_o: f64,
}

impl Default for NavState {
    fn default() -> Self {
        Self {
            t: 0.0,
            r_iw: Rotation::identity(),
            p_wi: Vector3::zeros(),
            v_w: Vector3::zeros(),
            b_g: Vector3::zeros(),
            b_a: Vector3::zeros(),
            r_ir: Rotation::identity(),
            p_ir: Vector3::zeros(),
            t_o: 0.0,
        }
    }
}

impl NavState {
    pub fn r_wi(&self) -> Rotation {
        self.r_iw.transpose()
    }

    pub fn bias(&self) -> ImuBias {
        ImuBias::new(self.b_g, self.b_a)
    }

    pub fn retract(&self, d: &Tangent) -> NavState {
        let v3 = |o: usize| Vector3::new(d[o], d[o + 1], d[o + 2]);
        NavState {
            t: self.t,
            r_iw: Rotation::exp(&-v3(ROT)) * self.r_iw,
            p_wi: self.p_wi + v3(POS),
            v_w: self.v_w + v3(VEL),
            b_g: self.b_g + v3(BG),
            b_a: self.b_a + v3(BA),
            r_ir: self.r_ir.retract(&v3(EXT_ROT)),
            p_ir: self.p_ir + v3(EXT_POS),
            t_o: self.t_o + d[OFFSET],
        }
    }

    /// `δ` such that `self.retract(δ) == other`.
    pub fn boxminus(&self, other: &NavState) -> Tangent {
        let mut d = Tangent::zeros();
        let rot = (self.r_iw * other.r_iw.transpose()).log();
        let ext = (self.r_ir.transpose() * other.r_ir).log();
        let blocks = [
            (ROT, rot),
            (POS, other.p_wi - self.p_wi),
            (VEL, other.v_w - self.v_w),
            (BG, other.b_g - self.b_g),
            (BA, other.b_a - self.b_a),
            (EXT_ROT, ext),
            (EXT_POS, other.p_ir - self.p_ir),
        ];
        for (o, v) in blocks {
            d.fixed_rows_mut::<3>(o).copy_from(&v);
        }
        d[OFFSET] = other.t_o - self.t_o;
        d
    }
}

/// A residual with Jacobian blocks on the tangent spaces of the connected
/// keyframes (each block is `rows × TANGENT_DIM`).
#[derive(Debug, Clone)]
pub struct FactorResidual {
    pub residual: DVector<f64>,
    pub jacobians: Vec<DMatrix<f64>>,
    pub information: DMatrix<f64>,
    /// Huber weight on the whitened residual; 1 for non-robust factors.
    pub robust_weight: f64,
}

impl FactorResidual {
    fn upper_sqrt_info(&self) -> Result<DMatrix<f64>> {
        let chol = self.information.clone().cholesky().ok_or(Error::NotPositiveDefinite)?;
        Ok(chol.l().transpose())
    }

    /// `Lᵀr` where `LLᵀ` is the information matrix.
    pub fn whitened(&self) -> Result<DVector<f64>> {
        Ok(self.upper_sqrt_info()? * &self.residual)
    }

    /// Whitened residual and Jacobians, both scaled by `√robust_weight`.
    pub fn weighted_system(&self) -> Result<(DVector<f64>, Vec<DMatrix<f64>>)> {
        let s = self.upper_sqrt_info()?;
        let w = self.robust_weight.sqrt();
        let r = &s * &self.residual * w;
        let j = self.jacobians.iter().map(|j| &s * j * w).collect();
        Ok((r, j))
    }

    /// Robustified cost contribution `ρ(‖e‖²)` (Huber for robust factors).
    pub fn cost(&self, huber_delta: Option<f64>) -> Result<f64> {
        let e2 = self.whitened()?.norm_squared();
        Ok(match huber_delta {
            Some(delta) => huber_rho(e2.sqrt(), delta),
            None => e2,
        })
    }
}

/// `ρ` such that `ρ(e) = e²` for `e ≤ δ` and `2δe − δ²` beyond.
pub fn huber_rho(e: f64, delta: f64) -> f64 {
    if e <= delta {
        e * e
    } else {
        2.0 * delta * e - delta * delta
    }
}

/// IRLS weight matching [`huber_rho`].
pub fn huber_weight(e: f64, delta: f64) -> f64 {
    if e <= delta {
        1.0
    } else {
        delta / e
    }
}

/// Spline-fit window around each radar stamp.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RadarWindowConfig {
    /// Seconds of IMU history before the stamp.
    pub past: f64,
    /// Seconds of IMU data after the stamp.
    pub future: f64,
    /// Constant-extrapolation tail beyond the future edge.
    pub extrapolation_pad: f64,
    pub n_segments: usize,
    /// Tikhonov weight per fitted sample.
    pub lambda_per_sample: f64,
}

impl Default for RadarWindowConfig {
    fn default() -> Self {
        Self { past: 0.14, future: 0.02, extrapolation_pad: 0.02, n_segments: 3, lambda_per_sample: 1e-6 }
    }
}

impl RadarWindowConfig {
    /// Admissible `t_O` range, keeping quadrature nodes and finite-difference
    /// probes inside the spline domain.
    pub fn offset_bounds(&self) -> (f64, f64) {
        let margin = 1e-3;
        (-(self.future + self.extrapolation_pad) + margin, self.past - margin)
    }
}

/// Everything the radar factor needs besides the keyframe state.
#[derive(Debug, Clone)]
pub struct RadarFactorContext {
    pub accel_spline: Arc<UniformCubicSpline>,
    pub gyro_spline: Arc<UniformCubicSpline>,
    pub radar_timestamp: f64,
    pub measurement: EgoVelMeasurement,
    pub gravity: Vector3<f64>,
    /// Per-sample gyro noise variance per axis, (rad/s)².
    pub gyro_sample_variance: f64,
}

impl RadarFactorContext {
    /// Fits both splines over the window around `radar_timestamp`.
    pub fn build(
        imu: &[ImuSample],
        measurement: EgoVelMeasurement,
        window: &RadarWindowConfig,
        noise: &ImuNoiseModel,
    ) -> Result<Self> {
        let t = measurement.timestamp;
        let (t0, t1) = (t - window.past, t + window.future);
        let lo = imu.partition_point(|s| s.t < t0);
        let hi = imu.partition_point(|s| s.t <= t1);
        let span = &imu[lo..hi];
        if span.len() < window.n_segments + 3 {
            return Err(Error::TooFewSamples { needed: window.n_segments + 3, got: span.len() });
        }
        let cfg = SplineFitConfig {
            n_segments: window.n_segments,
            lambda: window.lambda_per_sample * span.len() as f64,
            extrapolation_pad: window.extrapolation_pad,
        };
        let rate = (span.len() - 1) as f64 / (span[span.len() - 1].t - span[0].t);
        let accel: Vec<(f64, Vector3<f64>)> = span.iter().map(|s| (s.t, s.accel)).collect();
        let gyro: Vec<(f64, Vector3<f64>)> = span.iter().map(|s| (s.t, s.gyro)).collect();
        Ok(Self {
            accel_spline: Arc::new(UniformCubicSpline::fit(&accel, &cfg)?),
            gyro_spline: Arc::new(UniformCubicSpline::fit(&gyro, &cfg)?),
            radar_timestamp: t,
            measurement,
            gravity: noise.gravity(),
            gyro_sample_variance: noise.gyro_noise_density.powi(2) * rate,
        })
    }

    pub fn from_splines(
        accel_spline: UniformCubicSpline,
        gyro_spline: UniformCubicSpline,
        measurement: EgoVelMeasurement,
        gravity: Vector3<f64>,
    ) -> Self {
        Self {
            accel_spline: Arc::new(accel_spline),
            gyro_spline: Arc::new(gyro_spline),
            radar_timestamp: measurement.timestamp,
            measurement,
            gravity,
            gyro_sample_variance: 0.0,
        }
    }

    pub fn clamp_events(&self) -> usize {
        self.accel_spline.clamp_events() + self.gyro_spline.clamp_events()
    }

    /// IMU-clock time of the physical event for a given offset.
    pub fn event_time(&self, t_o: f64) -> f64 {
        self.radar_timestamp - t_o
    }
}

/// Rotation `Exp(∫_t^s (ω − b_g) dτ)` from the keyframe body frame at `t` to
/// the body frame at `s`, by a nested five-point rule.
fn body_rotation(ctx: &RadarFactorContext, b_g: &Vector3<f64>, t: f64, s: f64) -> Rotation {
    Rotation::exp(&ctx.gyro_spline.integrate_gl5(t, s, |_, w| w - b_g))
}

/// Velocity increment over `[t, t − t_O]`, expressed in the keyframe body
/// frame at `t`: `∫ R(t←s)·ã(s) ds` with `ã` the bias-corrected specific
/// force plus gravity seen in the body frame at `s`.
pub fn radar_delta_v(ctx: &RadarFactorContext, state: &NavState, t_o: f64) -> Vector3<f64> {
    let t = ctx.radar_timestamp;
    if t_o == 0.0 {
        return Vector3::zeros();
    }
    let g_body = state.r_iw * ctx.gravity;
    ctx.accel_spline.integrate_gl5(t, t - t_o, |s, a| {
        let r_ts = body_rotation(ctx, &state.b_g, t, s);
        r_ts * (a - state.b_a) + g_body
    })
}

/// Rotation increment `Exp(∫ (ω − b_g) ds)` over `[t, t − t_O]`.
pub fn radar_delta_r(ctx: &RadarFactorContext, state: &NavState, t_o: f64) -> Rotation {
    let t = ctx.radar_timestamp;
    if t_o == 0.0 {
        return Rotation::identity();
    }
    body_rotation(ctx, &state.b_g, t, t - t_o)
}

/// Predicted radar-frame ego-velocity for the keyframe state.
pub fn radar_predict(state: &NavState, ctx: &RadarFactorContext) -> Vector3<f64> {
    let body_v = state.r_iw * state.v_w;
    let s = ctx.event_time(state.t_o);
    let omega = ctx.gyro_spline.eval(s) - state.b_g;
    let lever = omega.cross(&state.p_ir);
    if state.t_o == 0.0 {
        return state.r_ir.transpose() * (body_v + lever);
    }
    let d_r = radar_delta_r(ctx, state, state.t_o);
    let d_v = radar_delta_v(ctx, state, state.t_o);
    state.r_ir.transpose() * (d_r.transpose() * (body_v + d_v) + lever)
}

/// Tangent coordinates the radar prediction depends on.
const RADAR_VARS: [usize; 19] = [
    ROT, ROT + 1, ROT + 2, VEL, VEL + 1, VEL + 2, BG, BG + 1, BG + 2, BA, BA + 1, BA + 2,
    EXT_ROT, EXT_ROT + 1, EXT_ROT + 2, EXT_POS, EXT_POS + 1, EXT_POS + 2, OFFSET,
];

/// Measurement covariance plus the lever-arm uncertainty caused by noise in
/// the fitted angular rate. Treating the true rate as a nuisance variable
/// and eliminating it gives this state-dependent covariance; without it the
/// noisy rate attenuates the lever-arm estimate toward zero.
pub fn radar_covariance(state: &NavState, ctx: &RadarFactorContext) -> Matrix3<f64> {
    let mut cov = ctx.measurement.covariance;
    if ctx.gyro_sample_variance > 0.0 {
        let s = ctx.event_time(state.t_o);
        if let Some(f) = ctx.gyro_spline.eval_variance_factor(s) {
            let m = state.r_ir.matrix().transpose() * skew(&state.p_ir);
            cov += m * m.transpose() * (ctx.gyro_sample_variance * f);
        }
    }
    0.5 * (cov + cov.transpose())
}

/// Whitened radar error `L⁻¹(z − h)` with `LLᵀ` from [`radar_covariance`].
pub fn radar_whitened_error(state: &NavState, ctx: &RadarFactorContext) -> Result<Vector3<f64>> {
    let chol = radar_covariance(state, ctx).cholesky().ok_or(Error::NotPositiveDefinite)?;
    let r = ctx.measurement.velocity - radar_predict(state, ctx);
    chol.l().solve_lower_triangular(&r).ok_or(Error::NotPositiveDefinite)
}

/// Central-difference Jacobian of the whitened radar error.
pub fn radar_jacobian(state: &NavState, ctx: &RadarFactorContext, step: f64) -> Result<DMatrix<f64>> {
    let mut j = DMatrix::zeros(3, TANGENT_DIM);
    for &k in &RADAR_VARS {
        let mut d = Tangent::zeros();
        d[k] = step;
        let plus = radar_whitened_error(&state.retract(&d), ctx)?;
        let minus = radar_whitened_error(&state.retract(&-d), ctx)?;
        let col = (plus - minus) / (2.0 * step);
        j.fixed_view_mut::<3, 1>(0, k).copy_from(&col);
    }
    Ok(j)
}

/// Radar factor in whitened form (identity information).
pub fn radar_residual(state: &NavState, ctx: &RadarFactorContext, huber_delta: f64) -> Result<FactorResidual> {
    let info = ctx.measurement.covariance.try_inverse().ok_or(Error::NotPositiveDefinite)?;
    if nalgebra::Cholesky::new(0.5 * (info + info.transpose())).is_none() {
        return Err(Error::NotPositiveDefinite);
    }
    let e = radar_whitened_error(state, ctx)?;
    let mut out = FactorResidual {
        residual: DVector::from_column_slice(e.as_slice()),
        jacobians: vec![radar_jacobian(state, ctx, RADAR_FD_STEP)?],
        information: DMatrix::identity(3, 3),
        robust_weight: 1.0,
    };
    out.robust_weight = huber_weight(e.norm(), huber_delta);
    Ok(out)
}

/// Noise of the per-keyframe calibration chaining factors.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CalibrationNoise {
    /// Seconds per keyframe.
    pub sigma_ct: f64,
    /// Radians per keyframe.
    pub sigma_ce_rot: f64,
    /// Meters per keyframe.
    pub sigma_ce_trans: f64,
}

impl Default for CalibrationNoise {
    fn default() -> Self {
        Self { sigma_ct: 1e-4, sigma_ce_rot: 0.05f64.to_radians(), sigma_ce_trans: 5e-4 }
    }
}

pub fn ct_residual(prev: &NavState, curr: &NavState, noise: &CalibrationNoise) -> FactorResidual {
    let mut jp = DMatrix::zeros(1, TANGENT_DIM);
    let mut jc = DMatrix::zeros(1, TANGENT_DIM);
    jp[(0, OFFSET)] = -1.0;
    jc[(0, OFFSET)] = 1.0;
    FactorResidual {
        residual: DVector::from_element(1, curr.t_o - prev.t_o),
        jacobians: vec![jp, jc],
        information: DMatrix::from_element(1, 1, noise.sigma_ct.powi(-2)),
        robust_weight: 1.0,
    }
}

pub fn ce_residual(prev: &NavState, curr: &NavState, noise: &CalibrationNoise) -> FactorResidual {
    let rot = (prev.r_ir.transpose() * curr.r_ir).log();
    let trans = curr.p_ir - prev.p_ir;
    let jr_inv = right_jacobian_inv(&rot);
    let mut jp = DMatrix::zeros(6, TANGENT_DIM);
    let mut jc = DMatrix::zeros(6, TANGENT_DIM);
    let cross = (curr.r_ir.transpose() * prev.r_ir).matrix().clone_owned();
    jp.fixed_view_mut::<3, 3>(0, EXT_ROT).copy_from(&(-jr_inv * cross));
    jc.fixed_view_mut::<3, 3>(0, EXT_ROT).copy_from(&jr_inv);
    jp.fixed_view_mut::<3, 3>(3, EXT_POS).copy_from(&-Matrix3::identity());
    jc.fixed_view_mut::<3, 3>(3, EXT_POS).copy_from(&Matrix3::identity());
    let mut info = DMatrix::zeros(6, 6);
    for i in 0..3 {
        info[(i, i)] = noise.sigma_ce_rot.powi(-2);
        info[(i + 3, i + 3)] = noise.sigma_ce_trans.powi(-2);
    }
    let mut res = DVector::zeros(6);
    res.fixed_rows_mut::<3>(0).copy_from(&rot);
    res.fixed_rows_mut::<3>(3).copy_from(&trans);
    FactorResidual { residual: res, jacobians: vec![jp, jc], information: info, robust_weight: 1.0 }
}

/// 9-dimensional preintegration residual `(r_R, r_v, r_p)` with first-order
/// bias correction around the stored linearization point.
pub fn imu_residual(
    si: &NavState,
    sj: &NavState,
    preint: &PreintegratedImu,
    gravity: &Vector3<f64>,
) -> Result<FactorResidual> {
    imu_residual_gated(si, sj, preint, gravity, true)
}

fn imu_residual_gated(
    si: &NavState,
    sj: &NavState,
    preint: &PreintegratedImu,
    gravity: &Vector3<f64>,
    gate: bool,
) -> Result<FactorResidual> {
    let dev = preint.bias_deviation(&si.bias());
    if gate && dev > REPREINTEGRATION_THRESHOLD {
        return Err(Error::RepreintegrationRequired(dev));
    }
    let dt = preint.dt_total;
    let dbg = si.b_g - preint.bias_linearization_point.gyro;
    let (d_r, d_v, d_p) = preint.corrected(&si.bias());
    let ri = si.r_wi();
    let rj = sj.r_wi();
    let rit = *si.r_iw.matrix();

    let r_err = d_r.transpose() * ri.transpose() * rj;
    let r_r = r_err.log();
    let v_body = rit * (sj.v_w - si.v_w - gravity * dt);
    let p_body = rit * (sj.p_wi - si.p_wi - si.v_w * dt - 0.5 * gravity * dt * dt);
    let r_v = v_body - d_v;
    let r_p = p_body - d_p;

    let jr_inv = right_jacobian_inv(&r_r);
    let mut ji = DMatrix::zeros(9, TANGENT_DIM);
    let mut jj = DMatrix::zeros(9, TANGENT_DIM);
    let rj_t_ri = (rj.transpose() * ri).matrix().clone_owned();
    ji.fixed_view_mut::<3, 3>(0, ROT).copy_from(&(-jr_inv * rj_t_ri));
    jj.fixed_view_mut::<3, 3>(0, ROT).copy_from(&jr_inv);
    let jrg = preint.j_r_bg();
    let exp_rt = r_err.transpose().matrix().clone_owned();
    ji.fixed_view_mut::<3, 3>(0, BG).copy_from(&(-jr_inv * exp_rt * right_jacobian(&(jrg * dbg)) * jrg));

    ji.fixed_view_mut::<3, 3>(3, ROT).copy_from(&skew(&v_body));
    ji.fixed_view_mut::<3, 3>(3, VEL).copy_from(&-rit);
    jj.fixed_view_mut::<3, 3>(3, VEL).copy_from(&rit);
    ji.fixed_view_mut::<3, 3>(3, BG).copy_from(&-preint.j_v_bg());
    ji.fixed_view_mut::<3, 3>(3, BA).copy_from(&-preint.j_v_ba());

    ji.fixed_view_mut::<3, 3>(6, ROT).copy_from(&skew(&p_body));
    ji.fixed_view_mut::<3, 3>(6, POS).copy_from(&-rit);
    jj.fixed_view_mut::<3, 3>(6, POS).copy_from(&rit);
    ji.fixed_view_mut::<3, 3>(6, VEL).copy_from(&(-rit * dt));
    ji.fixed_view_mut::<3, 3>(6, BG).copy_from(&-preint.j_p_bg());
    ji.fixed_view_mut::<3, 3>(6, BA).copy_from(&-preint.j_p_ba());

    let cov = DMatrix::from_column_slice(9, 9, preint.covariance.as_slice());
    let info = cov.cholesky().ok_or(Error::NotPositiveDefinite)?.inverse();
    let mut res = DVector::zeros(9);
    res.fixed_rows_mut::<3>(0).copy_from(&r_r);
    res.fixed_rows_mut::<3>(3).copy_from(&r_v);
    res.fixed_rows_mut::<3>(6).copy_from(&r_p);
    Ok(FactorResidual {
        residual: res,
        jacobians: vec![ji, jj],
        information: 0.5 * (&info + info.transpose()),
        robust_weight: 1.0,
    })
}

/// Preintegration residual stacked with the bias random walk between the
/// two keyframes (15 rows).
pub fn imu_factor_residual(
    si: &NavState,
    sj: &NavState,
    preint: &PreintegratedImu,
    noise: &ImuNoiseModel,
) -> Result<FactorResidual> {
    imu_factor_residual_with_gate(si, sj, preint, noise, true)
}

/// As [`imu_factor_residual`]; with `gate == false` a large bias deviation
/// is tolerated and corrected to first order anyway.
pub fn imu_factor_residual_with_gate(
    si: &NavState,
    sj: &NavState,
    preint: &PreintegratedImu,
    noise: &ImuNoiseModel,
    gate: bool,
) -> Result<FactorResidual> {
    let core = imu_residual_gated(si, sj, preint, &noise.gravity(), gate)?;
    let dt = preint.dt_total.max(1e-9);
    let mut res = DVector::zeros(15);
    res.rows_mut(0, 9).copy_from(&core.residual);
    res.fixed_rows_mut::<3>(9).copy_from(&(sj.b_g - si.b_g));
    res.fixed_rows_mut::<3>(12).copy_from(&(sj.b_a - si.b_a));
    let mut jacobians = Vec::with_capacity(2);
    for (k, j9) in core.jacobians.iter().enumerate() {
        let sign = if k == 0 { -1.0 } else { 1.0 };
        let mut j = DMatrix::zeros(15, TANGENT_DIM);
        j.rows_mut(0, 9).copy_from(j9);
        for i in 0..3 {
            j[(9 + i, BG + i)] = sign;
            j[(12 + i, BA + i)] = sign;
        }
        jacobians.push(j);
    }
    let mut info = DMatrix::zeros(15, 15);
    info.view_mut((0, 0), (9, 9)).copy_from(&core.information);
    for i in 0..3 {
        info[(9 + i, 9 + i)] = 1.0 / (noise.gyro_bias_walk.powi(2) * dt);
        info[(12 + i, 12 + i)] = 1.0 / (noise.accel_bias_walk.powi(2) * dt);
    }
    Ok(FactorResidual { residual: res, jacobians, information: info, robust_weight: 1.0 })
}

/// Linear Gaussian prior `‖J·(x ⊟ x₀) + r₀‖²` on one keyframe, already
/// whitened. Rotation blocks use the exact local-coordinate Jacobian.
#[derive(Debug, Clone)]
pub struct GaussianPrior {
    pub linearization: NavState,
    pub sqrt_info: DMatrix<f64>,
    pub r0: DVector<f64>,
}

impl GaussianPrior {
    /// Prior with zero offset and the given (SPD) information matrix.
    pub fn from_information(mean: NavState, information: &DMatrix<f64>) -> Result<Self> {
        let chol = information.clone().cholesky().ok_or(Error::NotPositiveDefinite)?;
        Ok(Self { linearization: mean, sqrt_info: chol.l().transpose(), r0: DVector::zeros(information.nrows()) })
    }

    pub fn information(&self) -> DMatrix<f64> {
        self.sqrt_info.transpose() * &self.sqrt_info
    }

    pub fn residual(&self, state: &NavState) -> FactorResidual {
        let d = self.linearization.boxminus(state);
        let mut dl = DMatrix::<f64>::identity(TANGENT_DIM, TANGENT_DIM);
        for o in [ROT, EXT_ROT] {
            let phi = Vector3::new(d[o], d[o + 1], d[o + 2]);
            dl.fixed_view_mut::<3, 3>(o, o).copy_from(&right_jacobian_inv(&phi));
        }
        let dd = DVector::from_column_slice(d.as_slice());
        let m = self.sqrt_info.nrows();
        FactorResidual {
            residual: &self.sqrt_info * dd + &self.r0,
            jacobians: vec![&self.sqrt_info * dl],
            information: DMatrix::identity(m, m),
            robust_weight: 1.0,
        }
    }
}

/// Standard deviations of the first-keyframe prior.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InitialPriorSigmas {
    pub roll_pitch: f64,
    pub yaw: f64,
    pub position: f64,
    pub velocity: f64,
    pub gyro_bias: f64,
    pub accel_bias: f64,
    pub ext_rot: f64,
    pub ext_trans: f64,
    pub t_o: f64,
}

impl Default for InitialPriorSigmas {
    fn default() -> Self {
        Self {
            roll_pitch: 0.2f64.to_radians(),
            yaw: 1e-3,
            position: 1e-3,
            velocity: 0.01,
            gyro_bias: 2e-3,
            accel_bias: 0.1,
            ext_rot: 20f64.to_radians(),
            ext_trans: 0.2,
            t_o: 0.05,
        }
    }
}

/// First-keyframe prior; the attitude information is set in the world frame
/// and mapped to the body-frame tangent.
pub fn initial_prior(mean: &NavState, sig: &InitialPriorSigmas) -> Result<GaussianPrior> {
    let mut info = DMatrix::zeros(TANGENT_DIM, TANGENT_DIM);
    let lw = Matrix3::from_diagonal(&Vector3::new(sig.roll_pitch, sig.roll_pitch, sig.yaw).map(|s| s.powi(-2)));
    let r = *mean.r_wi().matrix();
    info.fixed_view_mut::<3, 3>(ROT, ROT).copy_from(&(r.transpose() * lw * r));
    let diag = [
        (POS, sig.position),
        (VEL, sig.velocity),
        (BG, sig.gyro_bias),
        (BA, sig.accel_bias),
        (EXT_ROT, sig.ext_rot),
        (EXT_POS, sig.ext_trans),
    ];
    for (o, s) in diag {
        for i in 0..3 {
            info[(o + i, o + i)] = s.powi(-2);
        }
    }
    info[(OFFSET, OFFSET)] = sig.t_o.powi(-2);
    GaussianPrior::from_information(*mean, &info)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imu_preint::preintegrate;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn meas(v: Vector3<f64>, cov: Matrix3<f64>) -> EgoVelMeasurement {
        EgoVelMeasurement { timestamp: 1.0, velocity: v, covariance: cov, inlier_count: 50 }
    }

    /// Spline over [0.8, 1.2] built from explicit control points.
    fn spline_from(f: impl Fn(usize) -> Vector3<f64>) -> UniformCubicSpline {
        UniformCubicSpline::from_control_points(0.8, 1.2, (0..11).map(f).collect()).unwrap()
    }

    fn constant_ctx(accel: Vector3<f64>, gyro: Vector3<f64>, gravity: Vector3<f64>) -> RadarFactorContext {
        RadarFactorContext::from_splines(
            spline_from(|_| accel),
            spline_from(|_| gyro),
            meas(Vector3::zeros(), Matrix3::identity() * 0.01),
            gravity,
        )
    }

    fn random_state(rng: &mut ChaCha8Rng) -> NavState {
        let mut v = || Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
        NavState {
            t: 1.0,
            r_iw: Rotation::exp(&v()),
            p_wi: v() * 3.0,
            v_w: v() * 2.0,
            b_g: v() * 0.01,
            b_a: v() * 0.05,
            r_ir: Rotation::exp(&(v() * 0.3)),
            p_ir: v() * 0.2,
            t_o: 0.05,
        }
    }

    #[test]
    fn retract_boxminus_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let s = random_state(&mut rng);
        let d = Tangent::from_fn(|i, _| 0.1 * ((i as f64) * 0.7).sin());
        let back = s.boxminus(&s.retract(&d));
        assert!((back - d).norm() < 1e-12);
    }

    #[test]
    fn prediction_without_offset_or_rotation() {
        let ctx = constant_ctx(Vector3::zeros(), Vector3::zeros(), Vector3::new(0.0, 0.0, -9.81));
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut s = random_state(&mut rng);
        s.t_o = 0.0;
        s.b_g = Vector3::zeros();
        s.r_ir = Rotation::identity();
        s.p_ir = Vector3::zeros();
        assert!((radar_predict(&s, &ctx) - s.r_iw * s.v_w).norm() < 1e-15);
        assert_eq!(radar_delta_v(&ctx, &s, 0.0), Vector3::zeros());
        assert_eq!(radar_delta_r(&ctx, &s, 0.0), Rotation::identity());
    }

    #[test]
    fn lever_arm_only() {
        let w = 0.7;
        let ctx = constant_ctx(Vector3::zeros(), Vector3::new(0.0, 0.0, w), Vector3::zeros());
        let r_ir = Rotation::exp(&Vector3::new(0.2, -0.1, 0.4));
        let s = NavState { t: 1.0, r_ir, p_ir: Vector3::x(), ..Default::default() };
        let expect = r_ir.transpose() * Vector3::y() * w;
        assert!((radar_predict(&s, &ctx) - expect).norm() < 1e-14);
    }

    #[test]
    fn static_imu_gives_zero_increment() {
        let g = Vector3::new(0.0, 0.0, -9.80665);
        let r_iw = Rotation::exp(&Vector3::new(0.1, -0.2, 0.3));
        let b_a = Vector3::new(0.05, -0.03, 0.02);
        let b_g = Vector3::new(0.01, 0.0, -0.01);
        let ctx = constant_ctx(-(r_iw * g) + b_a, b_g, g);
        let s = NavState { t: 1.0, r_iw, b_a, b_g, ..Default::default() };
        for t_o in [-0.03, 0.05, 0.12] {
            assert!(radar_delta_v(&ctx, &s, t_o).norm() < 1e-12);
            assert!(radar_delta_r(&ctx, &s, t_o).angle() < 1e-15);
        }
    }

    #[test]
    fn constant_acceleration_integral() {
        let a0 = Vector3::new(1.5, -0.4, 0.2);
        let ctx = constant_ctx(a0, Vector3::zeros(), Vector3::zeros());
        let s = NavState { t: 1.0, ..Default::default() };
        for t_o in [-0.02, 0.1] {
            // the interval runs from t to t − t_O
            assert!((radar_delta_v(&ctx, &s, t_o) - a0 * -t_o).norm() < 1e-8);
        }
    }

    #[test]
    fn constant_rate_rotation_increment() {
        let w0 = Vector3::new(0.3, -0.2, 0.9);
        let ctx = constant_ctx(Vector3::zeros(), w0, Vector3::zeros());
        let s = NavState { t: 1.0, ..Default::default() };
        let got = radar_delta_r(&ctx, &s, 0.1);
        assert!(got.angle_to(&Rotation::exp(&(w0 * -0.1))) < 1e-15);
    }

    #[test]
    fn time_varying_rate_matches_fine_integration() {
        // roughly 0.5 rad/s with 0.5 rad/s² variation
        let gyro = spline_from(|i| Vector3::new(0.3 * (i as f64 * 0.1).sin(), 0.3 * (i as f64 * 0.08).cos(), 0.3 + 0.025 * i as f64));
        let oracle_spline = gyro.clone();
        let ctx = RadarFactorContext::from_splines(
            spline_from(|_| Vector3::zeros()),
            gyro,
            meas(Vector3::zeros(), Matrix3::identity()),
            Vector3::zeros(),
        );
        let s = NavState { t: 1.0, ..Default::default() };
        for t_o in [0.05, 0.12, -0.02] {
            let n = 20_000;
            let h = -t_o / n as f64;
            let mut r = Rotation::identity();
            for k in 0..n {
                let tm = 1.0 + (k as f64 + 0.5) * h;
                r = r * Rotation::exp(&(oracle_spline.eval(tm) * h));
            }
            let err = radar_delta_r(&ctx, &s, t_o).angle_to(&r);
            assert!(err < 1e-4, "t_O {t_o}: {err}");
        }
    }

    #[test]
    fn whitening_scales_with_covariance() {
        let ctx = constant_ctx(Vector3::zeros(), Vector3::zeros(), Vector3::zeros());
        let s = NavState { t: 1.0, v_w: Vector3::new(0.3, -0.2, 0.1), ..Default::default() };
        let base = Matrix3::new(0.01, 0.002, 0.0, 0.002, 0.02, 0.001, 0.0, 0.001, 0.015);
        let mut c1 = ctx.clone();
        c1.measurement = meas(Vector3::new(1.0, 1.0, 1.0), base);
        let mut c2 = ctx.clone();
        c2.measurement = meas(Vector3::new(1.0, 1.0, 1.0), base * 9.0);
        let w1 = radar_residual(&s, &c1, f64::INFINITY).unwrap().whitened().unwrap();
        let w2 = radar_residual(&s, &c2, f64::INFINITY).unwrap().whitened().unwrap();
        assert!((w1 / 3.0 - w2).norm() < 1e-12);

        let mut c3 = ctx;
        c3.measurement = meas(Vector3::new(1.0, 1.0, 1.0), Matrix3::from_diagonal(&Vector3::new(0.01, 1.0, 0.01)));
        let w3 = radar_residual(&s, &c3, f64::INFINITY).unwrap().whitened().unwrap();
        let w_ref = radar_residual(&s, &constant_like(&c3, Matrix3::identity() * 0.01), f64::INFINITY).unwrap().whitened().unwrap();
        assert!((w3[1] * 10.0 - w_ref[1]).abs() < 1e-12);
        assert!((w3[0] - w_ref[0]).abs() < 1e-12);
    }

    fn constant_like(ctx: &RadarFactorContext, cov: Matrix3<f64>) -> RadarFactorContext {
        let mut c = ctx.clone();
        c.measurement.covariance = cov;
        c
    }

    #[test]
    fn non_spd_measurement_is_rejected() {
        let mut ctx = constant_ctx(Vector3::zeros(), Vector3::zeros(), Vector3::zeros());
        ctx.measurement.covariance = Matrix3::from_diagonal(&Vector3::new(1.0, -1.0, 1.0));
        assert!(matches!(radar_residual(&NavState::default(), &ctx, 1.0), Err(Error::NotPositiveDefinite)));
    }

    #[test]
    fn huber_weight_profile() {
        assert_eq!(huber_weight(0.5, 1.345), 1.0);
        assert_eq!(huber_weight(1.345, 1.345), 1.0);
        assert!((huber_weight(2.69, 1.345) - 0.5).abs() < 1e-15);
        assert!((huber_rho(1.0, 1.0) - 1.0).abs() < 1e-15);
        // continuous derivative at δ
        let d = 1e-7;
        let slope = (huber_rho(2.0 + d, 2.0) - huber_rho(2.0 - d, 2.0)) / (2.0 * d);
        assert!((slope - 4.0).abs() < 1e-6);
    }

    fn smooth_ctx() -> RadarFactorContext {
        let accel = spline_from(|i| Vector3::new(1.0 + 0.3 * (i as f64).sin(), -0.5 + 0.1 * i as f64, 9.7));
        let gyro = spline_from(|i| Vector3::new(0.2 * (i as f64 * 0.4).cos(), 0.3, -0.1 * (i as f64 * 0.7).sin()));
        RadarFactorContext::from_splines(
            accel,
            gyro,
            meas(Vector3::new(1.0, 0.5, -0.2), Matrix3::identity() * 0.0025),
            Vector3::new(0.0, 0.0, -9.80665),
        )
    }

    #[test]
    fn radar_jacobian_richardson_consistency() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let ctx = smooth_ctx();
        for _ in 0..5 {
            let s = random_state(&mut rng);
            let coarse = radar_jacobian(&s, &ctx, 1e-5).unwrap();
            let fine = radar_jacobian(&s, &ctx, 1e-6).unwrap();
            for c in 0..TANGENT_DIM {
                let scale = coarse.column(c).norm().max(fine.column(c).norm());
                if scale < 1e-12 {
                    continue;
                }
                let diff = (coarse.column(c) - fine.column(c)).norm();
                assert!(diff < 0.01 * scale, "column {c}: {diff} vs {scale}");
            }
        }
    }

    #[test]
    fn offset_sensitivity_follows_acceleration() {
        // 1 m/s² sustained forward acceleration, gravity compensated exactly
        let g = Vector3::new(0.0, 0.0, -9.80665);
        let ctx = RadarFactorContext::from_splines(
            spline_from(|_| Vector3::new(1.0, 0.0, 9.80665)),
            spline_from(|_| Vector3::zeros()),
            meas(Vector3::zeros(), Matrix3::identity() * 0.01),
            g,
        );
        let s = NavState { t: 1.0, t_o: 0.05, v_w: Vector3::new(2.0, 0.0, 0.0), ..Default::default() };
        let r0 = radar_residual(&s, &ctx, f64::INFINITY).unwrap().residual;
        let s1 = NavState { t_o: 0.06, ..s };
        let r1 = radar_residual(&s1, &ctx, f64::INFINITY).unwrap().residual;
        // whitened by σ = 0.1 m/s
        let d = (r1 - r0) * 0.1;
        assert!((d[0].abs() - 0.01).abs() < 1e-9, "{d}");
        assert!(d[1].abs() < 1e-12 && d[2].abs() < 1e-12);
    }

    #[test]
    fn calibration_chaining_factors() {
        let noise = CalibrationNoise { sigma_ct: 1e-3, ..Default::default() };
        let a = NavState { t_o: 0.010, ..Default::default() };
        let b = NavState { t_o: 0.011, ..a };
        let ct = ct_residual(&a, &b, &noise);
        assert!((ct.whitened().unwrap()[0] - 1.0).abs() < 1e-9);
        assert_eq!(ct.jacobians[0][(0, OFFSET)], -1.0);
        assert_eq!(ct.jacobians[1][(0, OFFSET)], 1.0);
        assert_eq!(ct_residual(&a, &a, &noise).residual[0], 0.0);

        assert_eq!(ce_residual(&a, &a, &noise).residual.norm(), 0.0);
        let c = NavState { r_ir: Rotation::exp(&Vector3::new(0.0, 0.0, 1f64.to_radians())), ..a };
        let w = ce_residual(&a, &c, &noise).whitened().unwrap();
        assert!((w[2] - 1.0f64.to_radians() / noise.sigma_ce_rot).abs() < 1e-9);
        let d = NavState { p_ir: Vector3::new(0.01, 0.0, 0.0), ..a };
        let r = ce_residual(&a, &d, &noise).residual;
        assert_eq!(r.rows(0, 3).norm(), 0.0);
        assert_eq!(r[3], 0.01);
    }

    fn synthetic_imu(n: usize, dt: f64) -> Vec<ImuSample> {
        (0..n)
            .map(|k| {
                let t = k as f64 * dt;
                ImuSample::new(
                    t,
                    Vector3::new(0.5 * (2.0 * t).sin(), 0.3 * t.cos(), 9.8 + 0.2 * (3.0 * t).sin()),
                    Vector3::new(0.3 * (1.5 * t).cos(), -0.2 * t.sin(), 0.4 + 0.1 * (2.5 * t).cos()),
                )
            })
            .collect()
    }

    /// Keyframe `j` implied exactly by the preintegrated deltas.
    fn propagate(si: &NavState, p: &PreintegratedImu, g: &Vector3<f64>) -> NavState {
        let (d_r, d_v, d_p) = p.corrected(&si.bias());
        let ri = si.r_wi();
        let dt = p.dt_total;
        NavState {
            t: si.t + dt,
            r_iw: (ri * d_r).transpose(),
            v_w: si.v_w + g * dt + ri * d_v,
            p_wi: si.p_wi + si.v_w * dt + 0.5 * g * dt * dt + ri * d_p,
            ..*si
        }
    }

    #[test]
    fn imu_residual_zero_at_consistent_states() {
        let noise = ImuNoiseModel::default();
        let g = noise.gravity();
        let samples = synthetic_imu(41, 0.005);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let si = random_state(&mut rng);
        let p = preintegrate(&samples, si.bias(), &noise).unwrap();
        let sj = propagate(&si, &p, &g);
        let r = imu_residual(&si, &sj, &p, &g).unwrap();
        assert!(r.residual.norm() < 1e-12);

        let still: Vec<ImuSample> =
            (0..21).map(|k| ImuSample::new(k as f64 * 0.005, Vector3::new(0.0, 0.0, 9.80665), Vector3::zeros())).collect();
        let p = preintegrate(&still, ImuBias::default(), &noise).unwrap();
        let s = NavState::default();
        assert!(imu_residual(&s, &s, &p, &g).unwrap().residual.norm() < 1e-12);
    }

    #[test]
    fn imu_jacobians_match_finite_differences() {
        let noise = ImuNoiseModel::default();
        let g = noise.gravity();
        let samples = synthetic_imu(61, 0.005);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for trial in 0..4 {
            let si = random_state(&mut rng);
            let lin = if trial % 2 == 0 { si.bias() } else { ImuBias::new(si.b_g + Vector3::new(0.01, -0.02, 0.015), si.b_a) };
            let p = preintegrate(&samples, lin, &noise).unwrap();
            let sj = propagate(&si, &p, &g).retract(&Tangent::from_fn(|i, _| 0.05 * ((i * 13 % 7) as f64 - 3.0)));
            let an = imu_factor_residual(&si, &sj, &p, &noise).unwrap();
            let h = 1e-6;
            for (which, ja) in an.jacobians.iter().enumerate() {
                let mut fd = DMatrix::zeros(15, TANGENT_DIM);
                for k in 0..TANGENT_DIM {
                    let mut d = Tangent::zeros();
                    d[k] = h;
                    let eval = |d: &Tangent| {
                        let (a, b) = if which == 0 { (si.retract(d), sj) } else { (si, sj.retract(d)) };
                        imu_factor_residual(&a, &b, &p, &noise).unwrap().residual
                    };
                    fd.set_column(k, &((eval(&d) - eval(&-d)) / (2.0 * h)));
                }
                let rel = (ja - &fd).abs().max() / ja.abs().max();
                assert!(rel < 1e-5, "trial {trial} block {which}: {rel}");
            }
        }
    }

    #[test]
    fn large_bias_deviation_requests_repreintegration() {
        let noise = ImuNoiseModel::default();
        let samples = synthetic_imu(21, 0.005);
        let p = preintegrate(&samples, ImuBias::default(), &noise).unwrap();
        let s = NavState { b_a: Vector3::new(0.2, 0.0, 0.0), ..Default::default() };
        assert!(matches!(imu_residual(&s, &s, &p, &noise.gravity()), Err(Error::RepreintegrationRequired(_))));
    }

    #[test]
    fn prior_jacobian_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mean = random_state(&mut rng);
        let prior = initial_prior(&mean, &InitialPriorSigmas::default()).unwrap();
        let x = mean.retract(&Tangent::from_fn(|i, _| 0.2 * ((i as f64) * 1.3).cos()));
        let an = prior.residual(&x);
        let h = 1e-6;
        let mut fd = DMatrix::zeros(TANGENT_DIM, TANGENT_DIM);
        for k in 0..TANGENT_DIM {
            let mut d = Tangent::zeros();
            d[k] = h;
            fd.set_column(k, &((prior.residual(&x.retract(&d)).residual - prior.residual(&x.retract(&-d)).residual) / (2.0 * h)));
        }
        assert!((&an.jacobians[0] - &fd).abs().max() / an.jacobians[0].abs().max() < 1e-6);
        assert!(prior.residual(&mean).residual.norm() < 1e-12);
    }

    #[test]
    fn world_frame_yaw_prior_ignores_body_roll() {
        // yaw information stays on the world z axis whatever the attitude
        let mean = NavState { r_iw: Rotation::from_euler_zyx(0.4, 0.3, -0.2).transpose(), ..Default::default() };
        let sig = InitialPriorSigmas { roll_pitch: 1e-3, yaw: 1.0, ..Default::default() };
        let prior = initial_prior(&mean, &sig).unwrap();
        let yawed = NavState { r_iw: (Rotation::exp(&Vector3::new(0.0, 0.0, 0.01)) * mean.r_wi()).transpose(), ..mean };
        let w = prior.residual(&yawed).residual.rows(0, 3).norm();
        assert!((w - 0.01).abs() < 1e-6, "{w}");
    }

    #[test]
    fn prediction_at_truth_matches_simulator() {
        use crate::sim::{analytic_radar_velocity, generate, SensorRigSpec, TrajectoryKind, TrajectorySpec};
        for t_o in [0.1, 0.0, -0.015] {
            let rig = SensorRigSpec {
                true_t_o: t_o,
                true_r_ir: [0.1, -0.12, 0.08],
                true_p_ir: [0.10, -0.05, 0.02],
                noiseless: true,
                outlier_fraction: 0.0,
                ..Default::default()
            };
            let data = generate(&TrajectorySpec::new(TrajectoryKind::Sinusoidal3d, 30.0), &rig).unwrap();
            let window = RadarWindowConfig::default();
            let mut worst: f64 = 0.0;
            for m in data.egovel.iter().filter(|m| m.timestamp > 15.0 && m.timestamp < 41.0) {
                let ctx = RadarFactorContext::build(&data.imu, *m, &window, &rig.imu_noise).unwrap();
                let state = data.truth.nav_state(m.timestamp, &rig);
                let exact = analytic_radar_velocity(&data.truth, &rig, m.timestamp - t_o).unwrap();
                worst = worst.max((radar_predict(&state, &ctx) - exact).norm());
                // whitened: below one standard deviation of the 0.01 m/s floor
                assert!(radar_residual(&state, &ctx, 1.345).unwrap().residual.norm() < 1.0);
            }
            assert!(worst < 0.01, "t_O {t_o}: {worst}");
        }
    }
}
