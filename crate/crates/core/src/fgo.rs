//! Fixed-lag sliding-window smoother.
//!
//! Keyframes form a chain: consecutive keyframes are linked by an IMU
//! factor, a temporal-offset chaining factor and an extrinsic chaining
//! factor, and each keyframe may carry one radar factor. The oldest
//! keyframe carries a Gaussian prior (the initial prior, or the result of
//! marginalizing its predecessors). The normal equations are therefore
//! block tridiagonal and are solved block by block.

use std::collections::VecDeque;

use nalgebra::{DMatrix, DVector, SMatrix, SVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::factors::{
    ce_residual, ct_residual, huber_rho, initial_prior, radar_residual, CalibrationNoise,
    FactorResidual, GaussianPrior, InitialPriorSigmas, NavState, RadarFactorContext, REPREINTEGRATION_THRESHOLD,
    TANGENT_DIM,
};
use crate::imu_preint::{ImuNoiseModel, PreintegratedImu};

type Block = SMatrix<f64, TANGENT_DIM, TANGENT_DIM>;
type BlockVec = SVector<f64, TANGENT_DIM>;

/// Which calibration variables are estimated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum CalibrationMode {
    #[serde(rename = "none")]
    None,
    E,
    T,
    #[default]
    ET,
}

impl CalibrationMode {
    pub fn estimates_extrinsics(self) -> bool {
        matches!(self, CalibrationMode::E | CalibrationMode::ET)
    }

    pub fn estimates_offset(self) -> bool {
        matches!(self, CalibrationMode::T | CalibrationMode::ET)
    }

    /// Tangent coordinates held fixed in this mode.
    pub fn frozen_dims(self) -> Vec<usize> {
        let mut dims = Vec::new();
        if !self.estimates_extrinsics() {
            dims.extend(crate::factors::EXT_ROT..crate::factors::EXT_POS + 3);
        }
        if !self.estimates_offset() {
            dims.push(crate::factors::OFFSET);
        }
        dims
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(CalibrationMode::None),
            "E" => Ok(CalibrationMode::E),
            "T" => Ok(CalibrationMode::T),
            "ET" => Ok(CalibrationMode::ET),
            other => Err(Error::Config { path: "calibration".into(), message: format!("unknown mode `{other}`") }),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverConfig {
    pub max_iterations: usize,
    pub initial_damping: f64,
    /// Relative cost decrease below which the solve stops.
    pub cost_tolerance: f64,
    /// Step norm below which the solve stops.
    pub update_tolerance: f64,
    pub huber_delta: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self { max_iterations: 20, initial_damping: 1e-4, cost_tolerance: 1e-6, update_tolerance: 1e-9, huber_delta: 1.345 }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        let checks = [
            ("solver.initial_damping", self.initial_damping),
            ("solver.cost_tolerance", self.cost_tolerance),
            ("solver.update_tolerance", self.update_tolerance),
            ("solver.huber_delta", self.huber_delta),
        ];
        for (path, v) in checks {
            if !(v > 0.0) {
                return Err(Error::Config { path: path.into(), message: "must be positive".into() });
            }
        }
        if self.max_iterations == 0 {
            return Err(Error::Config { path: "solver.max_iterations".into(), message: "must be positive".into() });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WindowConfig {
    pub window_span: f64,
    pub calibration: CalibrationMode,
    pub calib_noise: CalibrationNoise,
    pub imu_noise: ImuNoiseModel,
    pub prior_sigmas: InitialPriorSigmas,
    /// Admissible `t_O` interval.
    pub offset_bounds: (f64, f64),
}

impl Default for WindowConfig {
    fn default() -> Self {
        Self {
            window_span: 1.0,
            calibration: CalibrationMode::ET,
            calib_noise: CalibrationNoise::default(),
            imu_noise: ImuNoiseModel::default(),
            prior_sigmas: InitialPriorSigmas::default(),
            offset_bounds: crate::factors::RadarWindowConfig::default().offset_bounds(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Keyframe {
    pub state: NavState,
    /// Preintegration from the previous keyframe; `None` for the oldest.
    pub imu: Option<PreintegratedImu>,
    pub radar: Option<RadarFactorContext>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum FactorKind {
    Prior,
    Imu,
    TimeOffset,
    Extrinsic,
    Radar,
}

/// Structural description of one factor: its type and keyframe indices.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FactorInfo {
    pub kind: FactorKind,
    pub keyframes: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizationReport {
    /// Newest keyframe time when the solve ran.
    pub t: f64,
    pub keyframes: usize,
    pub iterations: usize,
    pub initial_cost: f64,
    pub final_cost: f64,
    pub clamp_events: usize,
    pub converged: bool,
    pub status: String,
}

/// Linearized normal equations `H δ = −g` in block-tridiagonal form.
#[derive(Debug, Clone)]
pub struct NormalEquations {
    pub diag: Vec<Block>,
    /// `off[k]` couples keyframes `k` and `k + 1`.
    pub off: Vec<Block>,
    pub grad: Vec<BlockVec>,
    pub cost: f64,
}

impl NormalEquations {
    fn zeros(n: usize) -> Self {
        Self {
            diag: vec![Block::zeros(); n],
            off: vec![Block::zeros(); n.saturating_sub(1)],
            grad: vec![BlockVec::zeros(); n],
            cost: 0.0,
        }
    }

    fn accumulate(&mut self, first: usize, r: &DVector<f64>, jacobians: &[DMatrix<f64>]) {
        for (a, ja) in jacobians.iter().enumerate() {
            let ka = first + a;
            let g = ja.transpose() * r;
            self.grad[ka] += BlockVec::from_column_slice(g.as_slice());
            for (b, jb) in jacobians.iter().enumerate().skip(a) {
                let kb = first + b;
                let h = ja.transpose() * jb;
                let hb = Block::from_column_slice(h.as_slice());
                if ka == kb {
                    self.diag[ka] += hb;
                } else {
                    self.off[ka] += hb;
                }
            }
        }
    }

    /// Dense assembly, for tests and marginalization.
    pub fn dense(&self) -> (DMatrix<f64>, DVector<f64>) {
        let n = self.diag.len();
        let d = TANGENT_DIM;
        let mut h = DMatrix::zeros(n * d, n * d);
        let mut g = DVector::zeros(n * d);
        for k in 0..n {
            h.view_mut((k * d, k * d), (d, d)).copy_from(&self.diag[k]);
            g.rows_mut(k * d, d).copy_from(&self.grad[k]);
            if k + 1 < n {
                h.view_mut((k * d, (k + 1) * d), (d, d)).copy_from(&self.off[k]);
                h.view_mut(((k + 1) * d, k * d), (d, d)).copy_from(&self.off[k].transpose());
            }
        }
        (h, g)
    }

    /// Zero the rows and columns of frozen coordinates, with unit diagonal.
    fn freeze(&mut self, dims: &[usize]) {
        for k in 0..self.diag.len() {
            for &i in dims {
                for j in 0..TANGENT_DIM {
                    self.diag[k][(i, j)] = 0.0;
                    self.diag[k][(j, i)] = 0.0;
                    if k + 1 < self.diag.len() {
                        self.off[k][(i, j)] = 0.0;
                        self.off[k][(j, i)] = 0.0;
                    }
                }
                self.diag[k][(i, i)] = 1.0;
                self.grad[k][i] = 0.0;
            }
        }
    }

    /// Solves `(H + λ·diag(H)) δ = −g` by block elimination; `None` if the
    /// damped system is not positive definite.
    pub fn solve_damped(&self, lambda: f64) -> Option<Vec<BlockVec>> {
        let n = self.diag.len();
        let damp = |m: &Block| {
            let mut out = *m;
            for i in 0..TANGENT_DIM {
                out[(i, i)] += lambda * (m[(i, i)] + 1e-9);
            }
            out
        };
        let mut chols = Vec::with_capacity(n);
        let mut y = Vec::with_capacity(n);
        // forward elimination: S_k = D_k − B_{k−1}ᵀ S_{k−1}⁻¹ B_{k−1}
        for k in 0..n {
            let mut s = damp(&self.diag[k]);
            let mut rhs = -self.grad[k];
            if k > 0 {
                let b = &self.off[k - 1];
                let chol: &nalgebra::Cholesky<f64, nalgebra::Const<TANGENT_DIM>> = &chols[k - 1];
                let sinv_b = chol.solve(b);
                s -= b.transpose() * sinv_b;
                rhs -= b.transpose() * chol.solve(&y[k - 1]);
            }
            let s = 0.5 * (s + s.transpose());
            chols.push(s.cholesky()?);
            y.push(rhs);
        }
        let mut x = vec![BlockVec::zeros(); n];
        for k in (0..n).rev() {
            let mut rhs = y[k];
            if k + 1 < n {
                rhs -= self.off[k] * x[k + 1];
            }
            x[k] = chols[k].solve(&rhs);
        }
        Some(x)
    }
}

/// Gaussian prior `‖Jδ + r₀‖²` equivalent to `δᵀHδ + 2gᵀδ` at `lin`.
pub fn prior_from_quadratic(lin: NavState, h: &DMatrix<f64>, g: &DVector<f64>) -> GaussianPrior {
    let sym = 0.5 * (h + h.transpose());
    let eig = SymmetricEigen::new(sym);
    let max = eig.eigenvalues.iter().cloned().fold(0.0, f64::max);
    let keep: Vec<usize> = (0..eig.eigenvalues.len()).filter(|&i| eig.eigenvalues[i] > 1e-12 * max.max(1e-300)).collect();
    let mut j = DMatrix::zeros(keep.len(), TANGENT_DIM);
    let mut r0 = DVector::zeros(keep.len());
    for (row, &i) in keep.iter().enumerate() {
        let s = eig.eigenvalues[i].sqrt();
        let v = eig.eigenvectors.column(i);
        j.row_mut(row).copy_from(&(v.transpose() * s));
        r0[row] = v.dot(g) / s;
    }
    GaussianPrior { linearization: lin, sqrt_info: j, r0 }
}

#[derive(Debug, Clone)]
pub struct FactorGraphWindow {
    pub config: WindowConfig,
    keyframes: VecDeque<Keyframe>,
    prior: Option<GaussianPrior>,
    clamp_events: usize,
    marginalized: usize,
}

impl FactorGraphWindow {
    pub fn new(config: WindowConfig) -> Self {
        Self { config, keyframes: VecDeque::new(), prior: None, clamp_events: 0, marginalized: 0 }
    }

    pub fn keyframes(&self) -> impl Iterator<Item = &Keyframe> {
        self.keyframes.iter()
    }

    pub fn len(&self) -> usize {
        self.keyframes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keyframes.is_empty()
    }

    pub fn states(&self) -> Vec<NavState> {
        self.keyframes.iter().map(|k| k.state).collect()
    }

    pub fn newest(&self) -> Option<&NavState> {
        self.keyframes.back().map(|k| &k.state)
    }

    pub fn oldest(&self) -> Option<&NavState> {
        self.keyframes.front().map(|k| &k.state)
    }

    pub fn prior(&self) -> Option<&GaussianPrior> {
        self.prior.as_ref()
    }

    pub fn marginalized_count(&self) -> usize {
        self.marginalized
    }

    pub fn span(&self) -> f64 {
        match (self.keyframes.front(), self.keyframes.back()) {
            (Some(a), Some(b)) => b.state.t - a.state.t,
            _ => 0.0,
        }
    }

    pub fn set_states(&mut self, states: &[NavState]) {
        for (k, s) in self.keyframes.iter_mut().zip(states) {
            k.state = *s;
        }
    }

    /// Appends a keyframe. The first one receives the initial prior; later
    /// ones need the preintegration from the previous keyframe.
    pub fn add_keyframe(
        &mut self,
        state: NavState,
        preint: Option<PreintegratedImu>,
        radar: Option<RadarFactorContext>,
    ) -> Result<()> {
        if let Some(newest) = self.newest() {
            if !(state.t > newest.t) {
                return Err(Error::OutOfOrder { newest: newest.t, new: state.t });
            }
            if preint.is_none() {
                return Err(Error::Degenerate("keyframe after the first needs a preintegrated IMU interval".into()));
            }
            self.keyframes.push_back(Keyframe { state, imu: preint, radar });
        } else {
            self.prior = Some(initial_prior(&state, &self.config.prior_sigmas)?);
            self.keyframes.push_back(Keyframe { state, imu: None, radar });
        }
        Ok(())
    }

    pub fn factors(&self) -> Vec<FactorInfo> {
        let mut out = Vec::new();
        if self.prior.is_some() && !self.keyframes.is_empty() {
            out.push(FactorInfo { kind: FactorKind::Prior, keyframes: vec![0] });
        }
        for (k, kf) in self.keyframes.iter().enumerate() {
            if k > 0 {
                for kind in [FactorKind::Imu, FactorKind::TimeOffset, FactorKind::Extrinsic] {
                    out.push(FactorInfo { kind, keyframes: vec![k - 1, k] });
                }
            }
            if kf.radar.is_some() {
                out.push(FactorInfo { kind: FactorKind::Radar, keyframes: vec![k] });
            }
        }
        out
    }

    /// Checks the chain structure described in the module docs.
    pub fn check_structure(&self) -> Result<()> {
        for (k, w) in self.keyframes.iter().collect::<Vec<_>>().windows(2).enumerate() {
            if !(w[1].state.t > w[0].state.t) {
                return Err(Error::OutOfOrder { newest: w[0].state.t, new: w[1].state.t });
            }
            if w[1].imu.is_none() {
                return Err(Error::Degenerate(format!("keyframe {} lacks an IMU factor", k + 1)));
            }
        }
        Ok(())
    }

    /// Re-preintegrates intervals whose start bias moved too far.
    fn refresh_preintegration(&mut self) -> Result<()> {
        let noise = self.config.imu_noise;
        for k in 1..self.keyframes.len() {
            let bias = self.keyframes[k - 1].state.bias();
            let kf = &mut self.keyframes[k];
            if let Some(p) = &kf.imu {
                if p.bias_deviation(&bias) > REPREINTEGRATION_THRESHOLD {
                    kf.imu = Some(p.repreintegrate(bias, &noise)?);
                }
            }
        }
        Ok(())
    }

    fn factor_residuals(
        &self,
        states: &[NavState],
        k: usize,
        huber: f64,
        with_pair: bool,
    ) -> Result<Vec<(usize, FactorResidual, bool)>> {
        let mut out = Vec::new();
        let kf = &self.keyframes[k];
        if let Some(ctx) = &kf.radar {
            out.push((k, radar_residual(&states[k], ctx, huber)?, true));
        }
        if with_pair && k > 0 {
            let preint = kf.imu.as_ref().ok_or_else(|| Error::Degenerate("missing IMU factor".into()))?;
            let (a, b) = (&states[k - 1], &states[k]);
            out.push((k - 1, imu_factor_residual_ungated(a, b, preint, &self.config.imu_noise)?, false));
            out.push((k - 1, ct_residual(a, b, &self.config.calib_noise), false));
            out.push((k - 1, ce_residual(a, b, &self.config.calib_noise), false));
        }
        Ok(out)
    }

    /// Total robustified cost at `states`.
    pub fn cost(&self, states: &[NavState], huber: f64) -> Result<f64> {
        let mut total = 0.0;
        if let Some(p) = &self.prior {
            total += p.residual(&states[0]).residual.norm_squared();
        }
        for k in 0..self.keyframes.len() {
            if let Some(ctx) = &self.keyframes[k].radar {
                let e = crate::factors::radar_whitened_error(&states[k], ctx)?.norm();
                total += huber_rho(e, huber);
            }
            if k > 0 {
                let preint = self.keyframes[k].imu.as_ref().expect("checked structure");
                let (a, b) = (&states[k - 1], &states[k]);
                total += imu_factor_residual_ungated(a, b, preint, &self.config.imu_noise)?.cost(None)?;
                total += ct_residual(a, b, &self.config.calib_noise).cost(None)?;
                total += ce_residual(a, b, &self.config.calib_noise).cost(None)?;
            }
        }
        Ok(total)
    }

    /// Builds the Gauss–Newton system at the current estimate.
    pub fn linearize(&self, huber: f64) -> Result<NormalEquations> {
        let states = self.states();
        let mut ne = NormalEquations::zeros(states.len());
        if let Some(p) = &self.prior {
            let r = p.residual(&states[0]);
            ne.cost += r.residual.norm_squared();
            ne.accumulate(0, &r.residual, &r.jacobians);
        }
        for k in 0..states.len() {
            for (first, f, robust) in self.factor_residuals(&states, k, huber, true)? {
                let (r, j) = f.weighted_system()?;
                ne.cost += if robust { huber_rho(f.whitened()?.norm(), huber) } else { r.norm_squared() };
                ne.accumulate(first, &r, &j);
            }
        }
        ne.freeze(&self.config.calibration.frozen_dims());
        Ok(ne)
    }

    fn apply_step(&self, states: &[NavState], step: &[BlockVec], clamps: &mut usize) -> Vec<NavState> {
        let (lo, hi) = self.config.offset_bounds;
        states
            .iter()
            .zip(step)
            .map(|(s, d)| {
                let mut n = s.retract(d);
                if n.t_o < lo || n.t_o > hi {
                    *clamps += 1;
                    n.t_o = n.t_o.clamp(lo, hi);
                }
                n
            })
            .collect()
    }

    /// Levenberg–Marquardt over all keyframes in the window.
    pub fn optimize(&mut self, config: &SolverConfig) -> Result<OptimizationReport> {
        if self.keyframes.is_empty() {
            return Err(Error::Solver("empty window".into()));
        }
        self.check_structure()?;
        self.refresh_preintegration()?;
        let huber = config.huber_delta;
        let mut ne = self.linearize(huber)?;
        let initial_cost = ne.cost;
        let mut cost = initial_cost;
        let mut lambda = config.initial_damping;
        let mut iterations = 0;
        let mut clamps = 0;
        let mut converged = false;
        let mut status = "max_iterations".to_string();
        let mut escalations = 0;
        while iterations < config.max_iterations {
            iterations += 1;
            if cost <= f64::MIN_POSITIVE {
                converged = true;
                status = "zero_cost".into();
                break;
            }
            let Some(step) = ne.solve_damped(lambda) else {
                lambda *= 10.0;
                escalations += 1;
                if escalations > 10 {
                    return Err(Error::Solver("damped normal equations stayed indefinite".into()));
                }
                continue;
            };
            let step_norm = step.iter().map(|s| s.norm_squared()).sum::<f64>().sqrt();
            let states = self.states();
            let mut trial_clamps = 0;
            let trial = self.apply_step(&states, &step, &mut trial_clamps);
            let trial_cost = self.cost(&trial, huber)?;
            if trial_cost < cost {
                self.set_states(&trial);
                clamps += trial_clamps;
                let rel = (cost - trial_cost) / cost;
                lambda = (lambda * 0.5).max(1e-12);
                escalations = 0;
                if rel < config.cost_tolerance || step_norm < config.update_tolerance {
                    converged = true;
                    status = if rel < config.cost_tolerance { "cost_tolerance" } else { "update_tolerance" }.into();
                    cost = trial_cost;
                    break;
                }
                self.refresh_preintegration()?;
                ne = self.linearize(huber)?;
                cost = ne.cost;
            } else {
                if step_norm < config.update_tolerance {
                    converged = true;
                    status = "update_tolerance".into();
                    break;
                }
                lambda *= 10.0;
                escalations += 1;
                if escalations > 10 {
                    // no descent direction left at this damping: treat as converged
                    converged = true;
                    status = "stalled".into();
                    break;
                }
            }
        }
        self.clamp_events += clamps;
        let radar_clamps: usize = self.keyframes.iter().filter_map(|k| k.radar.as_ref()).map(|c| c.clamp_events()).sum();
        Ok(OptimizationReport {
            t: self.newest().map(|s| s.t).unwrap_or(0.0),
            keyframes: self.keyframes.len(),
            iterations,
            initial_cost,
            final_cost: cost,
            clamp_events: self.clamp_events + radar_clamps,
            converged,
            status,
        })
    }

    /// Dense system over the first two keyframes from the factors that touch
    /// keyframe 0 only, frozen coordinates applied.
    pub fn departing_system(&self, huber: f64) -> Result<NormalEquations> {
        let states = self.states();
        let n = states.len().min(2);
        let mut ne = NormalEquations::zeros(n);
        if let Some(p) = &self.prior {
            let r = p.residual(&states[0]);
            ne.cost += r.residual.norm_squared();
            ne.accumulate(0, &r.residual, &r.jacobians);
        }
        let mut facs = self.factor_residuals(&states, 0, huber, false)?;
        if n == 2 {
            facs.extend(self.factor_residuals(&states, 1, huber, true)?.into_iter().filter(|(first, _, _)| *first == 0));
        }
        for (first, f, robust) in facs {
            let (r, j) = f.weighted_system()?;
            ne.cost += if robust { huber_rho(f.whitened()?.norm(), huber) } else { r.norm_squared() };
            ne.accumulate(first, &r, &j);
        }
        ne.freeze(&self.config.calibration.frozen_dims());
        Ok(ne)
    }

    /// Removes the oldest keyframe, folding its factors into a prior on the
    /// next one via the Schur complement.
    pub fn marginalize_oldest(&mut self, huber: f64) -> Result<()> {
        if self.keyframes.len() < 2 {
            return Err(Error::Degenerate("need two keyframes to marginalize".into()));
        }
        let ne = self.departing_system(huber)?;
        let (h, g) = ne.dense();
        let d = TANGENT_DIM;
        let h00 = h.view((0, 0), (d, d)).into_owned();
        let h01 = h.view((0, d), (d, d)).into_owned();
        let h11 = h.view((d, d), (d, d)).into_owned();
        let g0 = g.rows(0, d).into_owned();
        let g1 = g.rows(d, d).into_owned();
        let chol = h00.cholesky().ok_or(Error::NotPositiveDefinite)?;
        let h_m = h11 - h01.transpose() * chol.solve(&h01);
        let g_m = g1 - h01.transpose() * chol.solve(&g0);
        let mut h_m = 0.5 * (&h_m + h_m.transpose());
        let mut g_m = g_m;
        // frozen coordinates carry no information into the prior
        for &i in &self.config.calibration.frozen_dims() {
            h_m.row_mut(i).fill(0.0);
            h_m.column_mut(i).fill(0.0);
            g_m[i] = 0.0;
        }
        let lin = self.keyframes[1].state;
        self.prior = Some(prior_from_quadratic(lin, &h_m, &g_m));
        self.keyframes.pop_front();
        self.keyframes[0].imu = None;
        self.marginalized += 1;
        Ok(())
    }

    /// Marginalizes while the window spans more than the configured length.
    pub fn enforce_span(&mut self, huber: f64) -> Result<usize> {
        let mut n = 0;
        while self.keyframes.len() > 2 && self.span() > self.config.window_span {
            self.marginalize_oldest(huber)?;
            n += 1;
        }
        Ok(n)
    }
}

/// IMU factor evaluated without the re-preintegration gate (trial steps
/// may cross it; the window re-preintegrates before the next linearization).
fn imu_factor_residual_ungated(
    a: &NavState,
    b: &NavState,
    preint: &PreintegratedImu,
    noise: &ImuNoiseModel,
) -> Result<FactorResidual> {
    crate::factors::imu_factor_residual_with_gate(a, b, preint, noise, false)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::factors::{Tangent, BG, EXT_POS, EXT_ROT, OFFSET, POS, ROT, VEL};
    use crate::imu_preint::{preintegrate, samples_between};
    use crate::sim::{generate, SensorRigSpec, SimDataset, TrajectoryKind, TrajectorySpec};
    use crate::factors::RadarWindowConfig;

    fn dataset(t_o: f64, seed: u64, noiseless: bool, duration: f64) -> SimDataset {
        let rig = SensorRigSpec {
            true_t_o: t_o,
            true_r_ir: [0.1, -0.12, 0.08],
            true_p_ir: [0.10, -0.05, 0.02],
            noiseless,
            outlier_fraction: 0.0,
            seed,
            ..Default::default()
        };
        generate(&TrajectorySpec::new(TrajectoryKind::Sinusoidal3d, duration), &rig).unwrap()
    }

    /// Window of keyframes at every radar stamp in `[t0, t1]`, states at truth.
    fn truth_window(d: &SimDataset, t0: f64, t1: f64, cfg: WindowConfig, span: f64) -> FactorGraphWindow {
        let mut w = FactorGraphWindow::new(WindowConfig { window_span: span, ..cfg });
        let mut prev: Option<f64> = None;
        for m in d.egovel.iter().filter(|m| m.timestamp >= t0 && m.timestamp <= t1) {
            let t = m.timestamp;
            let state = d.truth.nav_state(t, &d.rig);
            let ctx = RadarFactorContext::build(&d.imu, *m, &RadarWindowConfig::default(), &d.rig.imu_noise).unwrap();
            let preint = prev.map(|tp| {
                preintegrate(&samples_between(&d.imu, tp, t), d.truth.nav_state(tp, &d.rig).bias(), &d.rig.imu_noise)
                    .unwrap()
            });
            w.add_keyframe(state, preint, Some(ctx)).unwrap();
            prev = Some(t);
        }
        w
    }

    #[test]
    fn factor_counts() {
        let d = dataset(0.05, 1, true, 10.0);
        let mut w = FactorGraphWindow::new(WindowConfig::default());
        let s0 = d.truth.nav_state(15.0, &d.rig);
        w.add_keyframe(s0, None, None).unwrap();
        assert_eq!(w.factors().len(), 1);
        assert_eq!(w.factors()[0].kind, FactorKind::Prior);
        let m = d.egovel.iter().find(|m| m.timestamp > 15.05).unwrap();
        let ctx = RadarFactorContext::build(&d.imu, *m, &RadarWindowConfig::default(), &d.rig.imu_noise).unwrap();
        let p = preintegrate(&samples_between(&d.imu, 15.0, m.timestamp), s0.bias(), &d.rig.imu_noise).unwrap();
        w.add_keyframe(d.truth.nav_state(m.timestamp, &d.rig), Some(p.clone()), Some(ctx)).unwrap();
        assert_eq!(w.factors().len(), 5);
        let t2 = m.timestamp + 0.1;
        let p2 = preintegrate(&samples_between(&d.imu, m.timestamp, t2), s0.bias(), &d.rig.imu_noise).unwrap();
        w.add_keyframe(d.truth.nav_state(t2, &d.rig), Some(p2), None).unwrap();
        assert_eq!(w.factors().len(), 8);
        let err = w.add_keyframe(d.truth.nav_state(t2, &d.rig), Some(p), None);
        assert!(matches!(err, Err(Error::OutOfOrder { .. })));
        w.check_structure().unwrap();
    }

    #[test]
    fn block_solver_matches_dense() {
        let d = dataset(0.05, 2, false, 10.0);
        let w = truth_window(&d, 16.0, 17.0, WindowConfig::default(), 10.0);
        let mut ne = w.linearize(1.345).unwrap();
        // move off the optimum so the gradient is not tiny
        for g in ne.grad.iter_mut() {
            *g += BlockVec::from_fn(|i, _| (i as f64 * 0.37).sin());
        }
        let lambda = 1e-3;
        let x = ne.solve_damped(lambda).unwrap();
        let (h, g) = ne.dense();
        let mut hd = h.clone();
        for i in 0..h.nrows() {
            hd[(i, i)] += lambda * (h[(i, i)] + 1e-9);
        }
        let dense = hd.clone().lu().solve(&-&g).unwrap();
        let flat = DVector::from_iterator(dense.len(), x.iter().flat_map(|b| b.iter().cloned()));
        assert!((&flat - &dense).norm() <= 1e-8 * dense.norm().max(1.0));
        // gauge: the damped system is positive definite
        let min_eig = SymmetricEigen::new(hd).eigenvalues.min();
        assert!(min_eig > 0.0);
    }

    #[test]
    fn truth_is_a_fixed_point() {
        let d = dataset(0.05, 3, true, 10.0);
        let mut w = truth_window(&d, 16.0, 17.0, WindowConfig::default(), 10.0);
        let r = w.optimize(&SolverConfig::default()).unwrap();
        assert!(r.initial_cost < 1e-2, "{r:?}");
        assert!(r.final_cost <= r.initial_cost);
    }

    fn perturbed(s: &NavState, k: usize) -> NavState {
        let mut d = Tangent::zeros();
        let sgn = if k % 2 == 0 { 1.0 } else { -1.0 };
        for i in 0..3 {
            d[ROT + i] = sgn * 2f64.to_radians() / 3f64.sqrt();
            d[POS + i] = sgn * 0.05 / 3f64.sqrt();
        }
        d[OFFSET] = 0.02;
        s.retract(&d)
    }

    #[test]
    fn converges_from_perturbed_truth() {
        let d = dataset(0.05, 4, true, 10.0);
        let truth = truth_window(&d, 16.0, 17.0, WindowConfig::default(), 10.0).states();
        let mut w = truth_window(&d, 16.0, 17.0, WindowConfig::default(), 10.0);
        // the prior pins the first keyframe at truth
        let start: Vec<NavState> = truth.iter().enumerate().map(|(k, s)| if k == 0 { *s } else { perturbed(s, k) }).collect();
        w.set_states(&start);
        let cfg = SolverConfig { max_iterations: 50, cost_tolerance: 1e-12, ..Default::default() };
        let r = w.optimize(&cfg).unwrap();
        assert!(r.final_cost < r.initial_cost);
        for (est, tr) in w.states().iter().zip(&truth) {
            assert!((est.p_wi - tr.p_wi).norm() < 1e-3, "position {}", (est.p_wi - tr.p_wi).norm());
            assert!(est.r_iw.angle_to(&tr.r_iw).to_degrees() < 0.01);
            assert!((est.t_o - tr.t_o).abs() < 1e-4, "t_O {}", est.t_o - tr.t_o);
        }
    }

    #[test]
    fn accepted_steps_never_raise_cost() {
        let d = dataset(0.05, 5, false, 10.0);
        let mut w = truth_window(&d, 16.0, 17.0, WindowConfig::default(), 10.0);
        let start: Vec<NavState> = w.states().iter().enumerate().map(|(k, s)| if k == 0 { *s } else { perturbed(s, k) }).collect();
        w.set_states(&start);
        let mut last = f64::INFINITY;
        for _ in 0..8 {
            let r = w.optimize(&SolverConfig { max_iterations: 1, ..Default::default() }).unwrap();
            assert!(r.final_cost <= r.initial_cost + 1e-9 * r.initial_cost);
            assert!(r.final_cost <= last * (1.0 + 1e-9));
            last = r.final_cost;
        }
    }

    #[test]
    fn huber_bounds_a_corrupted_measurement() {
        let d = dataset(0.05, 6, false, 10.0);
        let solve = |corrupt: bool, huber_delta: f64| {
            let cfg = WindowConfig { calibration: CalibrationMode::None, ..Default::default() };
            let mut w = truth_window(&d, 16.0, 17.0, cfg, 10.0);
            if corrupt {
                let kf = &mut w.keyframes[5];
                kf.radar.as_mut().unwrap().measurement.velocity.x += 10.0;
            }
            let truth = w.states();
            w.optimize(&SolverConfig { max_iterations: 30, huber_delta, ..Default::default() }).unwrap();
            w.states().iter().zip(&truth).map(|(a, b)| (a.v_w - b.v_w).norm()).fold(0.0, f64::max)
        };
        let clean = solve(false, 1.345);
        let robust = solve(true, 1.345);
        let quadratic = solve(true, 1e12);
        assert!(robust < 2.0 * clean, "clean {clean} robust {robust}");
        assert!(quadratic > 20.0 * robust, "robust {robust} quadratic {quadratic}");
    }

    #[test]
    fn marginal_prior_matches_dense_joint_covariance() {
        let d = dataset(0.05, 7, false, 10.0);
        let mut w = truth_window(&d, 16.0, 16.1, WindowConfig::default(), 10.0);
        assert_eq!(w.len(), 2);
        let ne = w.departing_system(1.345).unwrap();
        let (h, _) = ne.dense();
        // marginal covariance of keyframe 1 from the joint inverse
        let cov = h.clone().cholesky().unwrap().inverse();
        let dd = TANGENT_DIM;
        let cov11 = cov.view((dd, dd), (dd, dd)).into_owned();
        let info_oracle = cov11.cholesky().unwrap().inverse();
        w.marginalize_oldest(1.345).unwrap();
        let info = w.prior().unwrap().information();
        // frozen-free mode: compare every entry relative to the matrix scale
        let rel = (&info - &info_oracle).abs().max() / info_oracle.abs().max();
        assert!(rel < 1e-8, "{rel}");
        assert_eq!(w.len(), 1);
        assert!(SymmetricEigen::new(info).eigenvalues.min() > -1e-6 * info_oracle.abs().max());
    }

    #[test]
    fn zero_coupling_gives_zero_prior() {
        let h = DMatrix::<f64>::zeros(TANGENT_DIM, TANGENT_DIM);
        let g = DVector::<f64>::zeros(TANGENT_DIM);
        let p = prior_from_quadratic(NavState::default(), &h, &g);
        assert_eq!(p.sqrt_info.nrows(), 0);
        assert_eq!(p.residual(&NavState::default()).residual.len(), 0);
    }

    #[test]
    fn marginal_prior_reproduces_quadratic() {
        let mut rng_h = DMatrix::<f64>::from_fn(TANGENT_DIM, TANGENT_DIM, |i, j| ((i * 7 + j * 3) as f64).sin());
        rng_h = &rng_h * rng_h.transpose() + DMatrix::identity(TANGENT_DIM, TANGENT_DIM);
        let g = DVector::from_fn(TANGENT_DIM, |i, _| (i as f64).cos());
        let lin = NavState::default();
        let p = prior_from_quadratic(lin, &rng_h, &g);
        let delta = Tangent::from_fn(|i, _| 1e-3 * (i as f64 * 0.3).sin());
        let x = lin.retract(&delta);
        let dl = DVector::from_column_slice(lin.boxminus(&x).as_slice());
        let quad = dl.dot(&(&rng_h * &dl)) + 2.0 * g.dot(&dl);
        let c0 = p.residual(&lin).residual.norm_squared();
        let got = p.residual(&x).residual.norm_squared() - c0;
        assert!((got - quad).abs() < 1e-9 * quad.abs().max(1.0));
    }

    #[test]
    fn frozen_calibration_stays_fixed() {
        let d = dataset(0.05, 8, false, 10.0);
        let cfg = WindowConfig { calibration: CalibrationMode::None, ..Default::default() };
        let mut w = truth_window(&d, 16.0, 17.0, cfg, 10.0);
        let start: Vec<NavState> = w.states().iter().map(|s| NavState { t_o: 0.0, ..*s }).collect();
        w.set_states(&start);
        w.optimize(&SolverConfig::default()).unwrap();
        for s in w.states() {
            assert_eq!(s.t_o, 0.0);
            assert_eq!(s.r_ir, d.rig.r_ir());
            assert_eq!(s.p_ir, d.rig.p_ir());
        }
        let dims = CalibrationMode::T.frozen_dims();
        assert_eq!(dims, (EXT_ROT..EXT_POS + 3).collect::<Vec<_>>());
        assert_eq!(CalibrationMode::E.frozen_dims(), vec![OFFSET]);
        assert!(CalibrationMode::ET.frozen_dims().is_empty());
        let _ = (VEL, BG);
    }

    #[test]
    fn sliding_window_keeps_span() {
        let d = dataset(0.05, 9, false, 10.0);
        let mut w = FactorGraphWindow::new(WindowConfig::default());
        let mut prev: Option<f64> = None;
        for m in d.egovel.iter().filter(|m| m.timestamp >= 16.0 && m.timestamp <= 19.0) {
            let t = m.timestamp;
            let ctx = RadarFactorContext::build(&d.imu, *m, &RadarWindowConfig::default(), &d.rig.imu_noise).unwrap();
            let preint = prev.map(|tp| {
                preintegrate(&samples_between(&d.imu, tp, t), d.truth.nav_state(tp, &d.rig).bias(), &d.rig.imu_noise).unwrap()
            });
            w.add_keyframe(d.truth.nav_state(t, &d.rig), preint, Some(ctx)).unwrap();
            w.optimize(&SolverConfig::default()).unwrap();
            w.enforce_span(1.345).unwrap();
            w.check_structure().unwrap();
            assert!(w.span() <= 1.0 + 0.1 + 1e-9);
            prev = Some(t);
        }
        assert!(w.marginalized_count() > 15);
    }
}
