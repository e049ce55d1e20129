//! Streaming orchestration: sensor ingestion, keyframe creation and window
//! optimization (optimizer role), and IMU-rate propagation of the latest
//! optimized state (navigation role).

use std::collections::VecDeque;
use std::sync::mpsc;
use std::sync::{Arc, Mutex};

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::factors::{CalibrationNoise, InitialPriorSigmas, NavState, RadarFactorContext, RadarWindowConfig};
use crate::fgo::{CalibrationMode, FactorGraphWindow, OptimizationReport, SolverConfig, WindowConfig};
use crate::geometry::{Pose, Rotation};
use crate::imu_preint::{preintegrate, samples_between, stationary_init, ImuBias, ImuNoiseModel, ImuSample};
use crate::radar_ego::{estimate_ransac, EgoVelMeasurement, RadarScan, RansacConfig, RaveGate};

#[derive(Debug, Clone)]
pub enum SensorEvent {
    Imu(ImuSample),
    Scan(RadarScan),
    EgoVel(EgoVelMeasurement),
}

impl SensorEvent {
    pub fn timestamp(&self) -> f64 {
        match self {
            SensorEvent::Imu(s) => s.t,
            SensorEvent::Scan(s) => s.timestamp,
            SensorEvent::EgoVel(m) => m.timestamp,
        }
    }
}

/// Initial values of the calibration variables.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct CalibrationGuess {
    /// Rotation vector of `R_IR`, radians.
    pub r_ir: [f64; 3],
    pub p_ir: [f64; 3],
    pub t_o: f64,
}

impl CalibrationGuess {
    pub fn rotation(&self) -> Rotation {
        Rotation::exp(&Vector3::from(self.r_ir))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub calibration: CalibrationMode,
    pub initial_calibration: CalibrationGuess,
    pub window_span: f64,
    /// Length of the stationary phase used for initialization.
    pub init_duration: f64,
    /// Longest radar silence before a radar-less keyframe is inserted.
    pub max_radar_gap: f64,
    pub rave_gate: bool,
    pub radar_window: RadarWindowConfig,
    pub ransac: RansacConfig,
    pub imu_noise: ImuNoiseModel,
    pub calib_noise: CalibrationNoise,
    pub prior: InitialPriorSigmas,
    pub solver: SolverConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            calibration: CalibrationMode::ET,
            initial_calibration: CalibrationGuess::default(),
            window_span: 1.0,
            init_duration: 12.0,
            max_radar_gap: 0.3,
            rave_gate: false,
            radar_window: RadarWindowConfig::default(),
            ransac: RansacConfig::default(),
            imu_noise: ImuNoiseModel::default(),
            calib_noise: CalibrationNoise::default(),
            prior: InitialPriorSigmas::default(),
            solver: SolverConfig::default(),
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("window_span", self.window_span),
            ("init_duration", self.init_duration),
            ("max_radar_gap", self.max_radar_gap),
            ("radar_window.past", self.radar_window.past),
            ("radar_window.future", self.radar_window.future),
        ];
        for (path, v) in positive {
            if !(v > 0.0) {
                return Err(Error::Config { path: path.into(), message: "must be positive".into() });
            }
        }
        if self.radar_window.n_segments == 0 {
            return Err(Error::Config { path: "radar_window.n_segments".into(), message: "must be positive".into() });
        }
        let (lo, hi) = self.radar_window.offset_bounds();
        if !(self.initial_calibration.t_o >= lo && self.initial_calibration.t_o <= hi) {
            return Err(Error::Config {
                path: "initial_calibration.t_o".into(),
                message: format!("must lie in [{lo}, {hi}]"),
            });
        }
        self.imu_noise.validate()?;
        self.solver.validate()
    }

    pub fn window_config(&self) -> WindowConfig {
        WindowConfig {
            window_span: self.window_span,
            calibration: self.calibration,
            calib_noise: self.calib_noise,
            imu_noise: self.imu_noise,
            prior_sigmas: self.prior,
            offset_bounds: self.radar_window.offset_bounds(),
        }
    }
}

/// One navigation output record.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrajectoryRecord {
    pub t: f64,
    pub pose: Pose,
    pub velocity: Vector3<f64>,
    pub t_o: f64,
    pub r_ir: Rotation,
    pub p_ir: Vector3<f64>,
}

/// Calibration estimate of the newest keyframe after each solve.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CalibrationRecord {
    pub t: f64,
    pub t_o: f64,
    pub r_ir: Rotation,
    pub p_ir: Vector3<f64>,
}

/// Size of the navigator's state jump at a publish instant.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Discontinuity {
    pub t: f64,
    pub position: f64,
    pub velocity: f64,
    pub rotation_deg: f64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PipelineCounters {
    pub imu_dropped: usize,
    pub radar_dropped_non_monotone: usize,
    pub radar_dropped_before_init: usize,
    pub keyframes_with_radar: usize,
    pub keyframes_without_radar: usize,
    pub egovel_rejected: usize,
    pub radar_factor_failures: usize,
    /// Radar-less keyframes inserted because radar went silent.
    pub gap_keyframes: usize,
}

#[derive(Debug, Clone)]
enum RadarInput {
    Scan(RadarScan),
    EgoVel(EgoVelMeasurement),
}

impl RadarInput {
    fn timestamp(&self) -> f64 {
        match self {
            RadarInput::Scan(s) => s.timestamp,
            RadarInput::EgoVel(m) => m.timestamp,
        }
    }
}

/// Optimized state handed from the optimizer to the navigator.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Snapshot {
    pub state: NavState,
    pub gravity: Vector3<f64>,
}

/// Optimizer role: owns the window and the IMU buffer used for fitting.
#[derive(Debug, Clone)]
pub struct Optimizer {
    config: PipelineConfig,
    imu: VecDeque<ImuSample>,
    pending: VecDeque<RadarInput>,
    init_samples: Vec<ImuSample>,
    init_bias_gyro: Option<Vector3<f64>>,
    init_attitude: Option<Rotation>,
    window: FactorGraphWindow,
    last_radar_t: f64,
    rave: RaveGate,
    pub counters: PipelineCounters,
    pub reports: Vec<OptimizationReport>,
    pub calibration: Vec<CalibrationRecord>,
}

impl Optimizer {
    pub fn new(config: PipelineConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            imu: VecDeque::new(),
            pending: VecDeque::new(),
            init_samples: Vec::new(),
            init_bias_gyro: None,
            init_attitude: None,
            window: FactorGraphWindow::new(config.window_config()),
            last_radar_t: f64::NEG_INFINITY,
            rave: RaveGate::default(),
            counters: PipelineCounters::default(),
            reports: Vec::new(),
            calibration: Vec::new(),
        })
    }

    pub fn window(&self) -> &FactorGraphWindow {
        &self.window
    }

    pub fn initialized(&self) -> bool {
        self.init_attitude.is_some()
    }

    fn latest_imu_t(&self) -> f64 {
        self.imu.back().map(|s| s.t).unwrap_or(f64::NEG_INFINITY)
    }

    /// Appends an event; out-of-order records are dropped and counted.
    pub fn ingest(&mut self, event: SensorEvent) -> Result<()> {
        match event {
            SensorEvent::Imu(s) => {
                if !(s.t > self.latest_imu_t()) {
                    self.counters.imu_dropped += 1;
                    return Ok(());
                }
                self.imu.push_back(s);
                if !self.initialized() {
                    self.init_samples.push(s);
                    self.try_initialize()?;
                }
                self.trim_imu();
            }
            SensorEvent::Scan(scan) => self.queue_radar(RadarInput::Scan(scan)),
            SensorEvent::EgoVel(m) => self.queue_radar(RadarInput::EgoVel(m)),
        }
        Ok(())
    }

    fn queue_radar(&mut self, input: RadarInput) {
        let t = input.timestamp();
        if !(t > self.last_radar_t) {
            self.counters.radar_dropped_non_monotone += 1;
            return;
        }
        self.last_radar_t = t;
        if !self.initialized() {
            self.counters.radar_dropped_before_init += 1;
            return;
        }
        self.pending.push_back(input);
    }

    fn try_initialize(&mut self) -> Result<()> {
        let first = self.init_samples[0].t;
        if self.init_samples.last().map(|s| s.t).unwrap_or(first) < first + self.config.init_duration {
            return Ok(());
        }
        let init = stationary_init(&self.init_samples, self.config.init_duration, &self.config.imu_noise)?;
        self.init_bias_gyro = Some(init.gyro_bias);
        self.init_attitude = Some(init.orientation_wi());
        self.init_samples.clear();
        Ok(())
    }

    fn trim_imu(&mut self) {
        // keep what the oldest keyframe's successor and the fitting window need
        let newest_kf = self.window.newest().map(|s| s.t).unwrap_or(f64::NEG_INFINITY);
        let horizon = (self.latest_imu_t() - 2.0).min(newest_kf - self.config.radar_window.past - 0.05);
        while self.imu.len() > 2 && self.imu[1].t < horizon {
            self.imu.pop_front();
        }
    }

    fn imu_slice(&mut self) -> &[ImuSample] {
        self.imu.make_contiguous()
    }

    /// Processes every radar event with complete IMU coverage; returns the
    /// snapshot to publish, if any keyframe was added.
    pub fn tick(&mut self) -> Result<Option<Snapshot>> {
        if !self.initialized() {
            return Ok(None);
        }
        let mut published = None;
        let ready_until = self.latest_imu_t() - self.config.radar_window.future;
        while let Some(front) = self.pending.front() {
            if front.timestamp() > ready_until {
                break;
            }
            let input = self.pending.pop_front().expect("front exists");
            published = Some(self.process_radar(input)?);
        }
        let newest = self.window.newest().map(|s| s.t);
        if self.pending.is_empty() {
            if let Some(t_kf) = newest {
                let t_now = self.latest_imu_t();
                if t_now - t_kf > self.config.max_radar_gap {
                    self.counters.gap_keyframes += 1;
                    published = Some(self.add_keyframe(t_now, None)?);
                }
            }
        }
        Ok(published)
    }

    fn process_radar(&mut self, input: RadarInput) -> Result<Snapshot> {
        let t = input.timestamp();
        if let Some(newest) = self.window.newest() {
            if !(t > newest.t) {
                // a radar-less keyframe already covers this instant
                self.counters.radar_dropped_non_monotone += 1;
                return Ok(self.snapshot());
            }
        }
        let measurement = match input {
            RadarInput::EgoVel(m) => Some(m),
            RadarInput::Scan(scan) => match estimate_ransac(&scan, &self.config.ransac) {
                Ok(m) => Some(m),
                Err(Error::EgoVelocityRejected(_)) | Err(Error::UnobservableAxis { .. }) | Err(Error::TooFewSamples { .. }) => {
                    self.counters.egovel_rejected += 1;
                    None
                }
                Err(e) => return Err(e),
            },
        };
        let measurement = match measurement {
            Some(m) if self.config.rave_gate && !self.rave.admit(&m.velocity) => {
                self.counters.egovel_rejected += 1;
                None
            }
            other => other,
        };
        let ctx = match measurement {
            Some(m) => {
                let window = self.config.radar_window;
                let noise = self.config.imu_noise;
                match RadarFactorContext::build(self.imu_slice(), m, &window, &noise) {
                    Ok(c) => Some(c),
                    Err(Error::TooFewSamples { .. }) | Err(Error::Singular(_)) => {
                        self.counters.radar_factor_failures += 1;
                        None
                    }
                    Err(e) => return Err(e),
                }
            }
            None => None,
        };
        self.add_keyframe(t, ctx)
    }

    fn add_keyframe(&mut self, t: f64, ctx: Option<RadarFactorContext>) -> Result<Snapshot> {
        if ctx.is_some() {
            self.counters.keyframes_with_radar += 1;
        } else {
            self.counters.keyframes_without_radar += 1;
        }
        let noise = self.config.imu_noise;
        match self.window.newest().copied() {
            None => {
                let calib = self.config.initial_calibration;
                let state = NavState {
                    t,
                    r_iw: self.init_attitude.expect("initialized").transpose(),
                    b_g: self.init_bias_gyro.expect("initialized"),
                    r_ir: calib.rotation(),
                    p_ir: Vector3::from(calib.p_ir),
                    t_o: calib.t_o,
                    ..NavState::default()
                };
                self.window.add_keyframe(state, None, ctx)?;
            }
            Some(prev) => {
                let samples = samples_between(self.imu_slice(), prev.t, t);
                let preint = preintegrate(&samples, prev.bias(), &noise)?;
                let state = predict(&prev, &preint_deltas(&preint), t, &noise.gravity());
                self.window.add_keyframe(state, Some(preint), ctx)?;
            }
        }
        let report = self.window.optimize(&self.config.solver)?;
        self.reports.push(report);
        self.window.enforce_span(self.config.solver.huber_delta)?;
        let newest = *self.window.newest().expect("nonempty");
        self.calibration.push(CalibrationRecord { t: newest.t, t_o: newest.t_o, r_ir: newest.r_ir, p_ir: newest.p_ir });
        Ok(self.snapshot())
    }

    fn snapshot(&self) -> Snapshot {
        Snapshot { state: *self.window.newest().expect("nonempty"), gravity: self.config.imu_noise.gravity() }
    }
}

struct Deltas {
    dt: f64,
    d_r: Rotation,
    d_v: Vector3<f64>,
    d_p: Vector3<f64>,
}

fn preint_deltas(p: &crate::imu_preint::PreintegratedImu) -> Deltas {
    Deltas { dt: p.dt_total, d_r: p.delta_r, d_v: p.delta_v, d_p: p.delta_p }
}

/// Keyframe prediction from the previous state and preintegrated deltas.
fn predict(prev: &NavState, d: &Deltas, t: f64, g: &Vector3<f64>) -> NavState {
    let r_wi = prev.r_wi();
    let rm = r_wi.matrix();
    NavState {
        t,
        r_iw: (r_wi * d.d_r).transpose(),
        p_wi: prev.p_wi + prev.v_w * d.dt + 0.5 * g * d.dt * d.dt + rm * d.d_p,
        v_w: prev.v_w + g * d.dt + rm * d.d_v,
        ..*prev
    }
}

/// Navigation role: propagates the latest snapshot sample by sample.
#[derive(Debug, Clone, Default)]
pub struct Navigator {
    snapshot: Option<Snapshot>,
    current: Option<NavState>,
    last_sample: Option<ImuSample>,
    history: VecDeque<ImuSample>,
    pub discontinuities: Vec<Discontinuity>,
}

impl Navigator {
    pub fn new() -> Self {
        Self::default()
    }

    fn step(state: &NavState, s0: &ImuSample, s1: &ImuSample, g: &Vector3<f64>) -> NavState {
        let bias = ImuBias::new(state.b_g, state.b_a);
        let dt = s1.t - s0.t;
        let omega = 0.5 * (s0.gyro + s1.gyro) - bias.gyro;
        let r0 = state.r_wi();
        let r1 = r0 * Rotation::exp(&(omega * dt));
        let a = 0.5 * (r0.matrix() * (s0.accel - bias.accel) + r1.matrix() * (s1.accel - bias.accel)) + g;
        NavState {
            t: s1.t,
            r_iw: r1.transpose(),
            p_wi: state.p_wi + state.v_w * dt + 0.5 * a * dt * dt,
            v_w: state.v_w + a * dt,
            ..*state
        }
    }

    /// State propagated from `snap` through the buffered samples up to `t`.
    fn propagate(&self, snap: &Snapshot, t: f64) -> NavState {
        let mut state = snap.state;
        let samples: Vec<ImuSample> = self.history.iter().copied().collect();
        let seg = samples_between(&samples, snap.state.t, t);
        for w in seg.windows(2) {
            state = Self::step(&state, &w[0], &w[1], &snap.gravity);
        }
        state.t = t;
        state
    }

    /// Installs a new snapshot and logs the resulting jump.
    pub fn publish(&mut self, snap: Snapshot) {
        let t_now = self.last_sample.map(|s| s.t).unwrap_or(snap.state.t).max(snap.state.t);
        let fresh = self.propagate(&snap, t_now);
        if let Some(old) = self.current {
            if old.t == t_now {
                self.discontinuities.push(Discontinuity {
                    t: t_now,
                    position: (fresh.p_wi - old.p_wi).norm(),
                    velocity: (fresh.v_w - old.v_w).norm(),
                    rotation_deg: fresh.r_iw.angle_to(&old.r_iw).to_degrees(),
                });
            }
        }
        self.current = Some(fresh);
        self.snapshot = Some(snap);
        while self.history.len() > 2 && self.history[1].t < snap.state.t {
            self.history.pop_front();
        }
    }

    /// Advances to the sample time; `None` until a snapshot is available.
    pub fn tick(&mut self, sample: &ImuSample) -> Option<TrajectoryRecord> {
        if self.last_sample.is_some_and(|l| !(sample.t > l.t)) {
            return None;
        }
        self.history.push_back(*sample);
        let prev = self.last_sample.replace(*sample);
        let snap = self.snapshot?;
        let state = match (self.current, prev) {
            (Some(cur), Some(p)) if cur.t == p.t && sample.t > cur.t => Self::step(&cur, &p, sample, &snap.gravity),
            (Some(cur), _) if cur.t == sample.t => cur,
            _ => self.propagate(&snap, sample.t),
        };
        self.current = Some(state);
        Some(record_of(&state))
    }
}

fn record_of(s: &NavState) -> TrajectoryRecord {
    TrajectoryRecord { t: s.t, pose: Pose::new(s.r_wi(), s.p_wi), velocity: s.v_w, t_o: s.t_o, r_ir: s.r_ir, p_ir: s.p_ir }
}

/// Everything a run produces.
#[derive(Debug, Clone, Default)]
pub struct PipelineOutput {
    pub trajectory: Vec<TrajectoryRecord>,
    pub calibration: Vec<CalibrationRecord>,
    pub reports: Vec<OptimizationReport>,
    pub discontinuities: Vec<Discontinuity>,
    pub counters: PipelineCounters,
    /// Final window states, oldest first.
    pub final_window: Vec<NavState>,
}

/// Merges the IMU stream with one radar stream in timestamp order. Ties put
/// IMU first so a radar record never waits on an IMU sample at its stamp.
pub fn merge_events(imu: &[ImuSample], scans: &[RadarScan], egovel: &[EgoVelMeasurement]) -> Vec<SensorEvent> {
    let mut out: Vec<SensorEvent> = Vec::with_capacity(imu.len() + scans.len() + egovel.len());
    out.extend(imu.iter().copied().map(SensorEvent::Imu));
    out.extend(scans.iter().cloned().map(SensorEvent::Scan));
    out.extend(egovel.iter().copied().map(SensorEvent::EgoVel));
    let rank = |e: &SensorEvent| if matches!(e, SensorEvent::Imu(_)) { 0 } else { 1 };
    out.sort_by(|a, b| a.timestamp().total_cmp(&b.timestamp()).then(rank(a).cmp(&rank(b))));
    out
}

/// Single-worker deterministic mode: ticks are interleaved in event order.
pub fn run_single(config: PipelineConfig, events: &[SensorEvent]) -> Result<PipelineOutput> {
    let mut opt = Optimizer::new(config)?;
    let mut nav = Navigator::new();
    let mut trajectory = Vec::new();
    for event in events {
        let imu = if let SensorEvent::Imu(s) = event { Some(*s) } else { None };
        opt.ingest(event.clone())?;
        if let Some(s) = imu {
            if let Some(snap) = opt.tick()? {
                nav.publish(snap);
            }
            if let Some(rec) = nav.tick(&s) {
                trajectory.push(rec);
            }
        }
    }
    Ok(finish(opt, nav, trajectory))
}

fn finish(opt: Optimizer, nav: Navigator, trajectory: Vec<TrajectoryRecord>) -> PipelineOutput {
    PipelineOutput {
        trajectory,
        final_window: opt.window.states(),
        calibration: opt.calibration,
        reports: opt.reports,
        discontinuities: nav.discontinuities,
        counters: opt.counters,
    }
}

/// Two-worker mode: the optimizer runs on its own thread and hands snapshots
/// to the navigator through a single-slot mailbox. Output timing depends on
/// thread scheduling.
pub fn run_threaded(config: PipelineConfig, events: &[SensorEvent]) -> Result<PipelineOutput> {
    let mut opt = Optimizer::new(config)?;
    let mailbox: Arc<Mutex<Option<Snapshot>>> = Arc::new(Mutex::new(None));
    // rendezvous: the producer runs at most one event ahead of the optimizer,
    // as a live sensor stream would
    let (tx, rx) = mpsc::sync_channel::<SensorEvent>(0);
    let slot = Arc::clone(&mailbox);
    let worker = std::thread::spawn(move || -> Result<Optimizer> {
        for event in rx {
            let is_imu = matches!(event, SensorEvent::Imu(_));
            opt.ingest(event)?;
            if is_imu {
                if let Some(snap) = opt.tick()? {
                    *slot.lock().expect("mailbox poisoned") = Some(snap);
                }
            }
        }
        Ok(opt)
    });
    let mut nav = Navigator::new();
    let mut trajectory = Vec::new();
    for event in events {
        if tx.send(event.clone()).is_err() {
            break;
        }
        if let SensorEvent::Imu(s) = event {
            if let Some(snap) = mailbox.lock().expect("mailbox poisoned").take() {
                nav.publish(snap);
            }
            if let Some(rec) = nav.tick(s) {
                trajectory.push(rec);
            }
        }
    }
    drop(tx);
    let opt = worker.join().map_err(|_| Error::Solver("optimizer worker panicked".into()))??;
    if let Some(snap) = mailbox.lock().expect("mailbox poisoned").take() {
        nav.publish(snap);
    }
    Ok(finish(opt, nav, trajectory))
}
