//! Uniform cubic B-splines fitted to a local window of IMU samples.
//!
//! A spline over `[t_min, t_max]` with `n` segments of width `h` carries
//! `n + 3` control points. Segment `i` is evaluated as a cubic in
//! `u = (t − t_min − i·h)/h ∈ [0, 1)` whose coefficients follow from the four
//! local control points through [`BASIS`].

use std::sync::atomic::{AtomicUsize, Ordering};

use nalgebra::{DMatrix, Vector3};

use crate::error::{Error, Result};
use crate::quadrature;

/// Uniform cubic B-spline basis matrix (already divided by 6).
/// Row `k` gives the coefficient of `u^k`.
pub const BASIS: [[f64; 4]; 4] = [
    [1.0 / 6.0, 4.0 / 6.0, 1.0 / 6.0, 0.0],
    [-3.0 / 6.0, 0.0, 3.0 / 6.0, 0.0],
    [3.0 / 6.0, -6.0 / 6.0, 3.0 / 6.0, 0.0],
    [-1.0 / 6.0, 3.0 / 6.0, -3.0 / 6.0, 1.0 / 6.0],
];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplineFitConfig {
    pub n_segments: usize,
    /// Tikhonov weight on the squared control-point norms.
    pub lambda: f64,
    /// Length of the replicated-last-sample tail appended before fitting.
    pub extrapolation_pad: f64,
}

impl Default for SplineFitConfig {
    fn default() -> Self {
        Self { n_segments: 8, lambda: 1e-6, extrapolation_pad: 0.0 }
    }
}

/// Fitted spline. Immutable apart from the clamp-event counter.
#[derive(Debug)]
pub struct UniformCubicSpline {
    t_min: f64,
    t_max: f64,
    /// End of real (non-replicated) data.
    data_end: f64,
    n_segments: usize,
    segment_width: f64,
    control_points: Vec<Vector3<f64>>,
    /// Control-point covariance per axis for unit-variance i.i.d. samples.
    unit_covariance: Option<DMatrix<f64>>,
    clamp_events: AtomicUsize,
}

impl Clone for UniformCubicSpline {
    fn clone(&self) -> Self {
        Self {
            t_min: self.t_min,
            t_max: self.t_max,
            data_end: self.data_end,
            n_segments: self.n_segments,
            segment_width: self.segment_width,
            control_points: self.control_points.clone(),
            unit_covariance: self.unit_covariance.clone(),
            clamp_events: AtomicUsize::new(self.clamp_events.load(Ordering::Relaxed)),
        }
    }
}

/// Basis weights of the four local control points at `u`.
#[inline]
fn basis_weights(u: f64) -> [f64; 4] {
    let p = [1.0, u, u * u, u * u * u];
    let mut w = [0.0; 4];
    for (j, wj) in w.iter_mut().enumerate() {
        *wj = (0..4).map(|k| p[k] * BASIS[k][j]).sum();
    }
    w
}

impl UniformCubicSpline {
    pub fn from_control_points(t_min: f64, t_max: f64, control_points: Vec<Vector3<f64>>) -> Result<Self> {
        if control_points.len() < 4 {
            return Err(Error::TooFewSamples { needed: 4, got: control_points.len() });
        }
        if !(t_max > t_min) {
            return Err(Error::Degenerate(format!("empty spline domain [{t_min}, {t_max}]")));
        }
        let n_segments = control_points.len() - 3;
        Ok(Self {
            t_min,
            t_max,
            data_end: t_max,
            n_segments,
            segment_width: (t_max - t_min) / n_segments as f64,
            control_points,
            unit_covariance: None,
            clamp_events: AtomicUsize::new(0),
        })
    }

    /// Least-squares fit with Tikhonov regularization, solved independently
    /// per axis through the banded normal equations.
    pub fn fit(samples: &[(f64, Vector3<f64>)], config: &SplineFitConfig) -> Result<Self> {
        if samples.len() < 4 {
            return Err(Error::TooFewSamples { needed: 4, got: samples.len() });
        }
        for (i, w) in samples.windows(2).enumerate() {
            if !(w[1].0 > w[0].0) {
                return Err(Error::NonMonotone { index: i + 1, prev: w[0].0, next: w[1].0 });
            }
        }
        if config.n_segments == 0 {
            return Err(Error::Degenerate("n_segments must be positive".into()));
        }
        if config.lambda < 0.0 || config.extrapolation_pad < 0.0 {
            return Err(Error::Degenerate("lambda and extrapolation_pad must be non-negative".into()));
        }
        let t_min = samples[0].0;
        let data_end = samples[samples.len() - 1].0;
        let padded = pad_samples(samples, config.extrapolation_pad);
        let t_max = data_end + config.extrapolation_pad;

        let n_c = config.n_segments + 3;
        let h = (t_max - t_min) / config.n_segments as f64;
        let mut normal = BandedSpd::zeros(n_c);
        let mut rhs = vec![Vector3::zeros(); n_c];
        // maps each real sample to the normal-equation right-hand side
        let mut sensitivity = DMatrix::<f64>::zeros(n_c, samples.len());
        for (j, (t, y)) in padded.iter().enumerate() {
            let (seg, u) = locate(t_min, h, config.n_segments, *t);
            let w = basis_weights(u);
            let src = j.min(samples.len() - 1);
            for a in 0..4 {
                rhs[seg + a] += w[a] * y;
                sensitivity[(seg + a, src)] += w[a];
                for b in 0..=a {
                    normal.add(seg + a, seg + b, w[a] * w[b]);
                }
            }
        }
        for i in 0..n_c {
            normal.add(i, i, config.lambda);
        }
        let factor = normal.cholesky()?;
        let mut control_points = vec![Vector3::zeros(); n_c];
        for axis in 0..3 {
            let b: Vec<f64> = rhs.iter().map(|r| r[axis]).collect();
            let x = factor.solve(&b);
            for (cp, xi) in control_points.iter_mut().zip(x) {
                cp[axis] = xi;
            }
        }
        let mut gain = DMatrix::<f64>::zeros(n_c, samples.len());
        for j in 0..samples.len() {
            let col: Vec<f64> = sensitivity.column(j).iter().copied().collect();
            gain.column_mut(j).copy_from_slice(&factor.solve(&col));
        }
        Ok(Self {
            t_min,
            t_max,
            data_end,
            n_segments: config.n_segments,
            segment_width: h,
            control_points,
            unit_covariance: Some(&gain * gain.transpose()),
            clamp_events: AtomicUsize::new(0),
        })
    }

    pub fn t_min(&self) -> f64 {
        self.t_min
    }

    /// Evaluable end of the domain, including any extrapolation tail.
    pub fn t_max(&self) -> f64 {
        self.t_max
    }

    pub fn data_end(&self) -> f64 {
        self.data_end
    }

    pub fn n_segments(&self) -> usize {
        self.n_segments
    }

    pub fn segment_width(&self) -> f64 {
        self.segment_width
    }

    pub fn control_points(&self) -> &[Vector3<f64>] {
        &self.control_points
    }

    /// Number of evaluations that fell outside the domain and were clamped.
    pub fn clamp_events(&self) -> usize {
        self.clamp_events.load(Ordering::Relaxed)
    }

    pub fn contains(&self, t: f64) -> bool {
        t >= self.t_min && t <= self.t_max
    }

    fn segment_at(&self, t: f64) -> (usize, f64) {
        let tc = if self.contains(t) {
            t
        } else {
            self.clamp_events.fetch_add(1, Ordering::Relaxed);
            t.clamp(self.t_min, self.t_max)
        };
        locate(self.t_min, self.segment_width, self.n_segments, tc)
    }

    /// Polynomial coefficients `a_0..a_3` of segment `i`.
    pub fn segment_coefficients(&self, i: usize) -> [Vector3<f64>; 4] {
        let c = &self.control_points[i..i + 4];
        let mut a = [Vector3::zeros(); 4];
        for (k, ak) in a.iter_mut().enumerate() {
            for j in 0..4 {
                *ak += BASIS[k][j] * c[j];
            }
        }
        a
    }

    pub fn eval(&self, t: f64) -> Vector3<f64> {
        let (i, u) = self.segment_at(t);
        let a = self.segment_coefficients(i);
        a[0] + u * (a[1] + u * (a[2] + u * a[3]))
    }

    /// Variance of `eval(t)` per axis when the fitted samples carry i.i.d.
    /// unit-variance noise; `None` for splines not produced by `fit`.
    pub fn eval_variance_factor(&self, t: f64) -> Option<f64> {
        let cov = self.unit_covariance.as_ref()?;
        let (i, u) = locate(self.t_min, self.segment_width, self.n_segments, t.clamp(self.t_min, self.t_max));
        let w = basis_weights(u);
        let mut v = 0.0;
        for a in 0..4 {
            for b in 0..4 {
                v += w[a] * w[b] * cov[(i + a, i + b)];
            }
        }
        Some(v)
    }

    /// First or second time derivative.
    pub fn eval_deriv(&self, t: f64, order: u8) -> Result<Vector3<f64>> {
        let (i, u) = self.segment_at(t);
        let a = self.segment_coefficients(i);
        let h = self.segment_width;
        match order {
            1 => Ok((a[1] + u * (2.0 * a[2] + 3.0 * u * a[3])) / h),
            2 => Ok((2.0 * a[2] + 6.0 * u * a[3]) / (h * h)),
            other => Err(Error::DerivativeOrder(other)),
        }
    }

    /// `∫_{t_a}^{t_b} transform(s, S(s)) ds` by five-point Gauss–Legendre.
    pub fn integrate_gl5<F>(&self, t_a: f64, t_b: f64, mut transform: F) -> Vector3<f64>
    where
        F: FnMut(f64, Vector3<f64>) -> Vector3<f64>,
    {
        quadrature::gl5(t_a, t_b, |s| transform(s, self.eval(s)))
    }

    /// Left/right limits at interior knot `k` (1..n_segments−1).
    pub fn knot_limits(&self, k: usize) -> (Vector3<f64>, Vector3<f64>) {
        assert!(k >= 1 && k < self.n_segments);
        let left = self.segment_coefficients(k - 1);
        let right = self.segment_coefficients(k);
        (left.iter().sum(), right[0])
    }
}

fn locate(t_min: f64, h: f64, n_segments: usize, t: f64) -> (usize, f64) {
    let x = (t - t_min) / h;
    let i = (x.floor().max(0.0) as usize).min(n_segments - 1);
    (i, x - i as f64)
}

/// Appends copies of the last sample at the median sample period over `pad`.
fn pad_samples(samples: &[(f64, Vector3<f64>)], pad: f64) -> Vec<(f64, Vector3<f64>)> {
    let mut out = samples.to_vec();
    if pad <= 0.0 {
        return out;
    }
    let mut dts: Vec<f64> = samples.windows(2).map(|w| w[1].0 - w[0].0).collect();
    dts.sort_by(f64::total_cmp);
    let period = dts[dts.len() / 2];
    let (t_last, y_last) = samples[samples.len() - 1];
    let count = (pad / period).round().max(1.0) as usize;
    for k in 1..=count {
        out.push((t_last + pad * k as f64 / count as f64, y_last));
    }
    out
}

/// Symmetric positive-definite matrix with half-bandwidth 3.
#[derive(Debug, Clone)]
struct BandedSpd {
    n: usize,
    // lower band: band[i][d] = A[i][i - d]
    band: Vec<[f64; 4]>,
}

impl BandedSpd {
    fn zeros(n: usize) -> Self {
        Self { n, band: vec![[0.0; 4]; n] }
    }

    fn add(&mut self, i: usize, j: usize, v: f64) {
        debug_assert!(i >= j && i - j <= 3);
        self.band[i][i - j] += v;
    }

    fn get(&self, i: usize, j: usize) -> f64 {
        let (i, j) = if i >= j { (i, j) } else { (j, i) };
        if i - j > 3 {
            0.0
        } else {
            self.band[i][i - j]
        }
    }

    fn cholesky(&self) -> Result<BandedCholesky> {
        let mut l = vec![[0.0; 4]; self.n];
        let lget = |l: &Vec<[f64; 4]>, i: usize, j: usize| if i - j > 3 { 0.0 } else { l[i][i - j] };
        for i in 0..self.n {
            let j0 = i.saturating_sub(3);
            for j in j0..=i {
                let mut sum = self.get(i, j);
                for k in j0.max(j.saturating_sub(3))..j {
                    sum -= lget(&l, i, k) * lget(&l, j, k);
                }
                if i == j {
                    if !(sum > 0.0) {
                        return Err(Error::Singular(format!("spline normal equations pivot {i} = {sum:.3e}")));
                    }
                    l[i][0] = sum.sqrt();
                } else {
                    l[i][i - j] = sum / l[j][0];
                }
            }
        }
        Ok(BandedCholesky { n: self.n, l })
    }
}

struct BandedCholesky {
    n: usize,
    l: Vec<[f64; 4]>,
}

impl BandedCholesky {
    fn solve(&self, b: &[f64]) -> Vec<f64> {
        let mut y = b.to_vec();
        for i in 0..self.n {
            for d in 1..=3.min(i) {
                y[i] -= self.l[i][d] * y[i - d];
            }
            y[i] /= self.l[i][0];
        }
        for i in (0..self.n).rev() {
            for d in 1..=3 {
                if i + d < self.n {
                    y[i] -= self.l[i + d][d] * y[i + d];
                }
            }
            y[i] /= self.l[i][0];
        }
        y
    }
}

/// Dense design matrix of the fit (rows: samples, columns: control points).
/// Exposed for test oracles that solve the problem by full factorization.
pub fn design_matrix(samples: &[(f64, Vector3<f64>)], t_min: f64, t_max: f64, n_segments: usize) -> DMatrix<f64> {
    let h = (t_max - t_min) / n_segments as f64;
    let mut b = DMatrix::zeros(samples.len(), n_segments + 3);
    for (row, (t, _)) in samples.iter().enumerate() {
        let (seg, u) = locate(t_min, h, n_segments, *t);
        let w = basis_weights(u);
        for a in 0..4 {
            b[(row, seg + a)] = w[a];
        }
    }
    b
}

/// The regularized objective `Σ‖y − S(t)‖² + λΣ‖c‖²` for `spline`.
pub fn fit_objective(spline: &UniformCubicSpline, samples: &[(f64, Vector3<f64>)], lambda: f64) -> f64 {
    let data: f64 = samples.iter().map(|(t, y)| (y - spline.eval(*t)).norm_squared()).sum();
    let reg: f64 = spline.control_points.iter().map(|c| c.norm_squared()).sum();
    data + lambda * reg
}
