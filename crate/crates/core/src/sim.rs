//! Synthetic ground truth and sensor streams.
//!
//! Every scenario starts with a stationary segment used for initialization,
//! after which the motion fades in through a quintic smoothstep envelope so
//! that position, velocity, acceleration and angular rate stay continuous.
//! All derivatives are analytic.

use std::f64::consts::PI;

use nalgebra::{Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::factors::NavState;
use crate::geometry::Rotation;
use crate::imu_preint::{ImuNoiseModel, ImuSample};
use crate::radar_ego::{EgoVelMeasurement, RadarPoint, RadarScan, COVARIANCE_FLOOR};

/// Length of the leading stationary segment, seconds.
pub const STATIC_DURATION: f64 = 12.0;

/// Time for the motion envelope to ramp from 0 to 1, seconds.
pub const RAMP_DURATION: f64 = 2.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TrajectoryKind {
    Static,
    ConstantVelocity,
    #[serde(rename = "sinusoidal-3d")]
    Sinusoidal3d,
    FigureEight,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrajectorySpec {
    pub kind: TrajectoryKind,
    /// Position amplitude, m.
    #[serde(default = "default_amplitude")]
    pub amplitude: f64,
    /// Attitude oscillation amplitude, rad.
    #[serde(default = "default_angular_amplitude")]
    pub angular_amplitude: f64,
    #[serde(default = "default_period")]
    pub period: f64,
    /// Duration of the moving part, after the stationary segment.
    pub duration: f64,
}

fn default_amplitude() -> f64 {
    1.5
}
fn default_angular_amplitude() -> f64 {
    30f64.to_radians()
}
fn default_period() -> f64 {
    6.0
}

impl TrajectorySpec {
    pub fn new(kind: TrajectoryKind, duration: f64) -> Self {
        Self {
            kind,
            amplitude: default_amplitude(),
            angular_amplitude: default_angular_amplitude(),
            period: default_period(),
            duration,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |path: &str, message: &str| Err(Error::Config { path: path.into(), message: message.into() });
        if !(self.period > 0.0) {
            return bad("trajectory.period", "must be positive");
        }
        if !(self.duration > 0.0) {
            return bad("trajectory.duration", "must be positive");
        }
        if !(self.amplitude >= 0.0) || !(self.angular_amplitude >= 0.0) {
            return bad("trajectory.amplitude", "must be non-negative");
        }
        if self.angular_amplitude >= 80f64.to_radians() {
            return bad("trajectory.angular_amplitude", "must stay below 80 degrees");
        }
        Ok(())
    }

    pub fn total_duration(&self) -> f64 {
        STATIC_DURATION + self.duration
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SensorRigSpec {
    /// Radar-to-IMU rotation as a rotation vector, rad.
    pub true_r_ir: [f64; 3],
    pub true_p_ir: [f64; 3],
    pub true_t_o: f64,
    pub imu_rate: f64,
    pub radar_rate: f64,
    pub imu_noise: ImuNoiseModel,
    pub true_b_g: [f64; 3],
    pub true_b_a: [f64; 3],
    pub doppler_noise: f64,
    pub outlier_fraction: f64,
    pub points_per_scan: usize,
    pub seed: u64,
    /// Zero all sensor noise (biases are still applied).
    pub noiseless: bool,
}

impl Default for SensorRigSpec {
    fn default() -> Self {
        Self {
            true_r_ir: [0.0; 3],
            true_p_ir: [0.0; 3],
            true_t_o: 0.0,
            imu_rate: 200.0,
            radar_rate: 10.0,
            imu_noise: ImuNoiseModel::default(),
            true_b_g: [0.002, -0.003, 0.001],
            true_b_a: [0.03, -0.02, 0.05],
            doppler_noise: 0.05,
            outlier_fraction: 0.1,
            points_per_scan: 100,
            seed: 1,
            noiseless: false,
        }
    }
}

impl SensorRigSpec {
    pub fn r_ir(&self) -> Rotation {
        Rotation::exp(&Vector3::from(self.true_r_ir))
    }
    pub fn p_ir(&self) -> Vector3<f64> {
        Vector3::from(self.true_p_ir)
    }
    pub fn b_g(&self) -> Vector3<f64> {
        Vector3::from(self.true_b_g)
    }
    pub fn b_a(&self) -> Vector3<f64> {
        Vector3::from(self.true_b_a)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |path: &str, message: &str| Err(Error::Config { path: path.into(), message: message.into() });
        if !(self.imu_rate > 0.0) {
            return bad("rig.imu_rate", "must be positive");
        }
        if !(self.radar_rate > 0.0) {
            return bad("rig.radar_rate", "must be positive");
        }
        if !(0.0..0.5).contains(&self.outlier_fraction) {
            return bad("rig.outlier_fraction", "must lie in [0, 0.5)");
        }
        if self.points_per_scan < 3 {
            return bad("rig.points_per_scan", "need at least 3 points");
        }
        if !(self.doppler_noise >= 0.0) {
            return bad("rig.doppler_noise", "must be non-negative");
        }
        self.imu_noise.validate()
    }
}

/// One scalar signal with its first two derivatives.
#[derive(Debug, Clone, Copy, Default)]
struct Jet {
    v: f64,
    d1: f64,
    d2: f64,
}

impl Jet {
    fn sin(amp: f64, w: f64, phase: f64, t: f64) -> Jet {
        let a = w * t + phase;
        Jet { v: amp * a.sin(), d1: amp * w * a.cos(), d2: -amp * w * w * a.sin() }
    }

    fn mul(self, o: Jet) -> Jet {
        Jet { v: self.v * o.v, d1: self.d1 * o.v + self.v * o.d1, d2: self.d2 * o.v + 2.0 * self.d1 * o.d1 + self.v * o.d2 }
    }

    fn add(self, c: f64) -> Jet {
        Jet { v: self.v + c, ..self }
    }
}

/// Quintic smoothstep over the ramp and its derivatives.
fn envelope(tm: f64) -> Jet {
    if tm <= 0.0 {
        return Jet::default();
    }
    if tm >= RAMP_DURATION {
        return Jet { v: 1.0, d1: 0.0, d2: 0.0 };
    }
    let r = RAMP_DURATION;
    let x = tm / r;
    Jet {
        v: x * x * x * (10.0 - 15.0 * x + 6.0 * x * x),
        d1: 30.0 * x * x * (1.0 - x) * (1.0 - x) / r,
        d2: 60.0 * x * (1.0 - x) * (1.0 - 2.0 * x) / (r * r),
    }
}

/// Antiderivative of [`envelope`], used for ramped constant velocity.
fn envelope_integral(tm: f64) -> Jet {
    if tm <= 0.0 {
        return Jet::default();
    }
    let e = envelope(tm);
    let r = RAMP_DURATION;
    let v = if tm >= r {
        0.5 * r + (tm - r)
    } else {
        let x = tm / r;
        r * x.powi(4) * (2.5 - 3.0 * x + x * x)
    };
    Jet { v, d1: e.v, d2: e.d1 }
}

/// Fixed base tilt so that initialization has non-trivial roll and pitch.
const BASE_ROLL: f64 = 0.035;
const BASE_PITCH: f64 = -0.026;

/// Kinematic state of the IMU at one instant.
#[derive(Debug, Clone, Copy)]
pub struct TruthSample {
    pub t: f64,
    pub r_wi: Rotation,
    pub p_w: Vector3<f64>,
    pub v_w: Vector3<f64>,
    pub a_w: Vector3<f64>,
    /// Body-frame angular rate.
    pub omega_b: Vector3<f64>,
}

/// Analytic ground-truth trajectory.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub spec: TrajectorySpec,
}

impl GroundTruth {
    pub fn new(spec: TrajectorySpec) -> Self {
        Self { spec }
    }

    pub fn start(&self) -> f64 {
        0.0
    }

    pub fn end(&self) -> f64 {
        self.spec.total_duration()
    }

    fn position_jets(&self, tm: f64) -> [Jet; 3] {
        let s = &self.spec;
        let w = 2.0 * PI / s.period;
        let a = s.amplitude;
        let e = envelope(tm);
        match s.kind {
            TrajectoryKind::Static => [Jet::default(); 3],
            TrajectoryKind::ConstantVelocity => {
                let speed = a * w;
                let ei = envelope_integral(tm);
                let k = |c: f64| Jet { v: c * ei.v, d1: c * ei.d1, d2: c * ei.d2 };
                [k(speed), k(0.0), k(0.0)]
            }
            TrajectoryKind::Sinusoidal3d => [
                e.mul(Jet::sin(a, w, 0.0, tm)),
                e.mul(Jet::sin(a, 1.3 * w, PI / 2.0, tm).add(-a)),
                e.mul(Jet::sin(0.3 * a, 0.7 * w, 0.0, tm)),
            ],
            TrajectoryKind::FigureEight => {
                [e.mul(Jet::sin(a, w, 0.0, tm)), e.mul(Jet::sin(0.5 * a, 2.0 * w, 0.0, tm)), Jet::default()]
            }
        }
    }

    /// `(yaw, pitch, roll)` jets.
    fn angle_jets(&self, tm: f64) -> [Jet; 3] {
        let s = &self.spec;
        let w = 2.0 * PI / s.period;
        let th = s.angular_amplitude;
        let e = envelope(tm);
        let base = |j: Jet, c: f64| j.add(c);
        match s.kind {
            TrajectoryKind::Static | TrajectoryKind::ConstantVelocity => {
                [Jet::default(), base(Jet::default(), BASE_PITCH), base(Jet::default(), BASE_ROLL)]
            }
            TrajectoryKind::Sinusoidal3d => [
                e.mul(Jet::sin(th, 0.9 * w, 0.0, tm)),
                base(e.mul(Jet::sin(th, 1.1 * w, 0.5, tm)), BASE_PITCH),
                base(e.mul(Jet::sin(0.5 * th, 1.3 * w, 1.0, tm)), BASE_ROLL),
            ],
            TrajectoryKind::FigureEight => [
                e.mul(Jet::sin(th, w, 0.0, tm)),
                base(e.mul(Jet::sin(0.2 * th, 2.0 * w, 0.0, tm)), BASE_PITCH),
                base(e.mul(Jet::sin(0.2 * th, 2.0 * w, PI / 2.0, tm)), BASE_ROLL),
            ],
        }
    }

    pub fn sample(&self, t: f64) -> TruthSample {
        let tm = t - STATIC_DURATION;
        let p = self.position_jets(tm);
        let [y, pt, r] = self.angle_jets(tm);
        let r_wi = Rotation::from_euler_zyx(y.v, pt.v, r.v);
        let (sr, cr) = r.v.sin_cos();
        let (sp, cp) = pt.v.sin_cos();
        let omega_b = Vector3::new(
            r.d1 - y.d1 * sp,
            pt.d1 * cr + y.d1 * sr * cp,
            -pt.d1 * sr + y.d1 * cr * cp,
        );
        TruthSample {
            t,
            r_wi,
            p_w: Vector3::new(p[0].v, p[1].v, p[2].v),
            v_w: Vector3::new(p[0].d1, p[1].d1, p[2].d1),
            a_w: Vector3::new(p[0].d2, p[1].d2, p[2].d2),
            omega_b,
        }
    }

    /// Exact IMU readings without bias or noise.
    pub fn ideal_imu(&self, t: f64, gravity: &Vector3<f64>) -> ImuSample {
        let s = self.sample(t);
        let r_iw = s.r_wi.transpose();
        ImuSample::new(t, r_iw * (s.a_w - gravity), s.omega_b)
    }

    /// Full keyframe state at IMU time `t`, calibration taken from the rig.
    pub fn nav_state(&self, t: f64, rig: &SensorRigSpec) -> NavState {
        let s = self.sample(t);
        NavState {
            t,
            r_iw: s.r_wi.transpose(),
            p_wi: s.p_w,
            v_w: s.v_w,
            b_g: rig.b_g(),
            b_a: rig.b_a(),
            r_ir: rig.r_ir(),
            p_ir: rig.p_ir(),
            t_o: rig.true_t_o,
        }
    }
}

/// Exact radar-frame velocity at the physical event time (IMU clock).
pub fn analytic_radar_velocity(truth: &GroundTruth, rig: &SensorRigSpec, t_event: f64) -> Result<Vector3<f64>> {
    if t_event < truth.start() - 1e-9 || t_event > truth.end() + 1e-9 {
        return Err(Error::OutOfRange { t: t_event, start: truth.start(), end: truth.end() });
    }
    let s = truth.sample(t_event);
    let body = s.r_wi.transpose() * s.v_w + s.omega_b.cross(&rig.p_ir());
    Ok(rig.r_ir().transpose() * body)
}

#[derive(Debug, Clone)]
pub struct SimDataset {
    pub imu: Vec<ImuSample>,
    pub scans: Vec<RadarScan>,
    pub egovel: Vec<EgoVelMeasurement>,
    pub truth: GroundTruth,
    pub rig: SensorRigSpec,
}

impl SimDataset {
    /// Truth sampled at the IMU stamps.
    pub fn truth_samples(&self) -> Vec<TruthSample> {
        self.imu.iter().map(|s| self.truth.sample(s.t)).collect()
    }
}

const AZIMUTH_LIMIT: f64 = PI / 3.0;
const ELEVATION_LIMIT: f64 = PI / 6.0;

pub fn generate(traj: &TrajectorySpec, rig: &SensorRigSpec) -> Result<SimDataset> {
    traj.validate()?;
    rig.validate()?;
    let truth = GroundTruth::new(*traj);
    let total = traj.total_duration();
    let g = rig.imu_noise.gravity();
    let noise_scale = if rig.noiseless { 0.0 } else { 1.0 };

    let mut imu_rng = ChaCha8Rng::seed_from_u64(rig.seed);
    imu_rng.set_stream(1);
    let unit = Normal::new(0.0, 1.0).expect("unit normal");
    let sg = rig.imu_noise.gyro_noise_density * rig.imu_rate.sqrt() * noise_scale;
    let sa = rig.imu_noise.accel_noise_density * rig.imu_rate.sqrt() * noise_scale;
    let n_imu = (total * rig.imu_rate).floor() as usize + 1;
    let mut imu = Vec::with_capacity(n_imu);
    for k in 0..n_imu {
        let t = k as f64 / rig.imu_rate;
        let ideal = truth.ideal_imu(t, &g);
        let na = Vector3::from_fn(|_, _| unit.sample(&mut imu_rng)) * sa;
        let ng = Vector3::from_fn(|_, _| unit.sample(&mut imu_rng)) * sg;
        imu.push(ImuSample::new(t, ideal.accel + rig.b_a() + na, ideal.gyro + rig.b_g() + ng));
    }

    let mut radar_rng = ChaCha8Rng::seed_from_u64(rig.seed);
    radar_rng.set_stream(2);
    let mut ego_rng = ChaCha8Rng::seed_from_u64(rig.seed);
    ego_rng.set_stream(3);
    let sd = rig.doppler_noise * noise_scale;
    let se = rig.doppler_noise * (3.0 / rig.points_per_scan as f64).sqrt();
    let mut scans = Vec::new();
    let mut egovel = Vec::new();
    let first = (rig.true_t_o * rig.radar_rate).ceil().max(0.0) as i64;
    let mut k = first;
    loop {
        let t_r = k as f64 / rig.radar_rate;
        let t_ev = t_r - rig.true_t_o;
        if t_ev > total {
            break;
        }
        k += 1;
        if t_ev < 0.0 {
            continue;
        }
        let v_r = analytic_radar_velocity(&truth, rig, t_ev)?;
        let mut points = Vec::with_capacity(rig.points_per_scan);
        for _ in 0..rig.points_per_scan {
            let az = radar_rng.random_range(-AZIMUTH_LIMIT..AZIMUTH_LIMIT);
            let el = radar_rng.random_range(-ELEVATION_LIMIT..ELEVATION_LIMIT);
            let range = radar_rng.random_range(1.0..30.0);
            let dir = Vector3::new(el.cos() * az.cos(), el.cos() * az.sin(), el.sin());
            let mut doppler = -dir.dot(&v_r) + sd * unit.sample(&mut radar_rng);
            if radar_rng.random::<f64>() < rig.outlier_fraction {
                let shift = radar_rng.random_range(3.0..6.0);
                doppler += if radar_rng.random::<bool>() { shift } else { -shift };
            }
            let intensity = radar_rng.random_range(0.0..1.0);
            points.push(RadarPoint { position: dir * range, doppler, intensity: Some(intensity) });
        }
        scans.push(RadarScan { timestamp: t_r, points });
        let noise = Vector3::from_fn(|_, _| unit.sample(&mut ego_rng)) * se * noise_scale;
        egovel.push(EgoVelMeasurement {
            timestamp: t_r,
            velocity: v_r + noise,
            covariance: Matrix3::identity() * (se * se).max(COVARIANCE_FLOOR),
            inlier_count: rig.points_per_scan,
        });
    }
    Ok(SimDataset { imu, scans, egovel, truth, rig: *rig })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imu_preint::{preintegrate, samples_between};
    use crate::radar_ego::{estimate_ransac, RansacConfig};

    fn spec(kind: TrajectoryKind) -> TrajectorySpec {
        TrajectorySpec::new(kind, 20.0)
    }

    #[test]
    fn envelope_is_smooth() {
        let h = 1e-5;
        for tm in [0.3, 1.0, 1.7] {
            let e = envelope(tm);
            assert!(((envelope(tm + h).v - envelope(tm - h).v) / (2.0 * h) - e.d1).abs() < 1e-8);
            assert!(((envelope(tm + h).d1 - envelope(tm - h).d1) / (2.0 * h) - e.d2).abs() < 1e-6);
            let ei = envelope_integral(tm);
            assert!(((envelope_integral(tm + h).v - envelope_integral(tm - h).v) / (2.0 * h) - ei.d1).abs() < 1e-8);
        }
        assert!((envelope_integral(RAMP_DURATION).v - 0.5 * RAMP_DURATION).abs() < 1e-12);
    }

    #[test]
    fn static_spec_is_static() {
        let rig = SensorRigSpec { noiseless: true, ..Default::default() };
        let d = generate(&spec(TrajectoryKind::Static), &rig).unwrap();
        let g = rig.imu_noise.gravity();
        for s in d.imu.iter().step_by(97) {
            let r_iw = d.truth.sample(s.t).r_wi.transpose();
            assert!((s.accel - (-(r_iw * g) + rig.b_a())).norm() < 1e-12);
        }
        for scan in d.scans.iter().step_by(13) {
            for p in &scan.points {
                assert!(p.doppler.abs() < 1e-12 || p.doppler.abs() >= 3.0);
            }
        }
    }

    #[test]
    fn constant_velocity_egovel() {
        let rig = SensorRigSpec { noiseless: true, ..Default::default() };
        let d = generate(&spec(TrajectoryKind::ConstantVelocity), &rig).unwrap();
        let v0 = Vector3::new(1.5 * 2.0 * PI / 6.0, 0.0, 0.0);
        let r_iw = Rotation::from_euler_zyx(0.0, BASE_PITCH, BASE_ROLL).transpose();
        for m in d.egovel.iter().filter(|m| m.timestamp > STATIC_DURATION + RAMP_DURATION) {
            assert!((m.velocity - r_iw * v0).norm() < 1e-12);
        }
    }

    #[test]
    fn finite_difference_self_consistency() {
        for kind in [TrajectoryKind::Sinusoidal3d, TrajectoryKind::FigureEight, TrajectoryKind::ConstantVelocity] {
            let truth = GroundTruth::new(spec(kind));
            for t in [12.7, 15.3, 22.9] {
                let s = truth.sample(t);
                let err = |h: f64| {
                    let fd = (truth.sample(t + h).p_w - truth.sample(t - h).p_w) / (2.0 * h);
                    (fd - s.v_w).norm()
                };
                let (e1, e2) = (err(1e-2), err(5e-3));
                // second order: halving the step divides the error by four
                assert!(e1 < 1e-3, "{kind:?} {e1}");
                if e1 > 1e-9 {
                    assert!((e1 / e2 - 4.0).abs() < 0.1, "{kind:?} {e1} {e2}");
                }
                let fda = (truth.sample(t + 1e-4).v_w - truth.sample(t - 1e-4).v_w) / 2e-4;
                assert!((fda - s.a_w).norm() < 1e-6);
                // angular rate from the rotation derivative
                let h = 1e-5;
                let dr = (truth.sample(t - h).r_wi.transpose() * truth.sample(t + h).r_wi).log() / (2.0 * h);
                assert!((dr - s.omega_b).norm() < 1e-7, "{kind:?} omega");
            }
        }
    }

    #[test]
    fn noiseless_preintegration_matches_truth() {
        let rig = SensorRigSpec { noiseless: true, imu_rate: 1000.0, ..Default::default() };
        let d = generate(&spec(TrajectoryKind::Sinusoidal3d), &rig).unwrap();
        let g = rig.imu_noise.gravity();
        let (t0, t1) = (16.0, 16.2);
        let samples = samples_between(&d.imu, t0, t1);
        let p = preintegrate(&samples, crate::imu_preint::ImuBias::new(rig.b_g(), rig.b_a()), &rig.imu_noise).unwrap();
        let (a, b) = (d.truth.sample(t0), d.truth.sample(t1));
        let dr = a.r_wi.transpose() * b.r_wi;
        assert!(p.delta_r.angle_to(&dr) < 1e-5);
        let dv = a.r_wi.transpose() * (b.v_w - a.v_w - g * 0.2);
        assert!((p.delta_v - dv).norm() < 1e-4);
        let dp = a.r_wi.transpose() * (b.p_w - a.p_w - a.v_w * 0.2 - 0.5 * g * 0.04);
        assert!((p.delta_p - dp).norm() < 1e-5);
    }

    #[test]
    fn radar_stamps_carry_the_offset() {
        let rig = SensorRigSpec { true_t_o: 0.1, noiseless: true, outlier_fraction: 0.0, ..Default::default() };
        let d = generate(&spec(TrajectoryKind::Sinusoidal3d), &rig).unwrap();
        let m = d.egovel.iter().find(|m| m.timestamp > 20.0).unwrap();
        let v = analytic_radar_velocity(&d.truth, &rig, m.timestamp - 0.1).unwrap();
        assert!((m.velocity - v).norm() < 1e-12);
        let scan = d.scans.iter().find(|s| s.timestamp == m.timestamp).unwrap();
        let est = estimate_ransac(scan, &RansacConfig::default()).unwrap();
        assert!((est.velocity - v).norm() < 1e-9);
    }

    #[test]
    fn lever_arm_velocity_for_pure_rotation() {
        let truth = GroundTruth::new(spec(TrajectoryKind::Static));
        let rig = SensorRigSpec { true_p_ir: [1.0, 0.0, 0.0], ..Default::default() };
        assert!(analytic_radar_velocity(&truth, &rig, 5.0).unwrap().norm() < 1e-15);
        assert!(analytic_radar_velocity(&truth, &rig, 99.0).is_err());
    }

    #[test]
    fn same_seed_same_data() {
        let rig = SensorRigSpec::default();
        let a = generate(&spec(TrajectoryKind::FigureEight), &rig).unwrap();
        let b = generate(&spec(TrajectoryKind::FigureEight), &rig).unwrap();
        assert_eq!(a.imu, b.imu);
        assert_eq!(a.scans, b.scans);
        assert_eq!(a.egovel, b.egovel);
        let c = generate(&spec(TrajectoryKind::FigureEight), &SensorRigSpec { seed: 2, ..rig }).unwrap();
        assert_ne!(a.imu, c.imu);
    }

    #[test]
    fn invalid_specs_are_rejected() {
        let mut t = spec(TrajectoryKind::Static);
        t.period = 0.0;
        assert!(matches!(generate(&t, &SensorRigSpec::default()), Err(Error::Config { .. })));
        let rig = SensorRigSpec { outlier_fraction: 0.6, ..Default::default() };
        assert!(matches!(generate(&spec(TrajectoryKind::Static), &rig), Err(Error::Config { .. })));
    }
}
