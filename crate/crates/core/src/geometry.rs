//! SO(3)/SE(3) helpers shared by every other module.
//!
//! Rotations are stored as plain 3×3 matrices. Composition re-orthonormalizes
//! through a polar decomposition whenever the product drifts from SO(3) by more
//! than [`REORTHO_TOLERANCE`].

use std::ops::Mul;

use nalgebra::{Matrix3, Rotation3, UnitQuaternion, Vector3};

use crate::error::{Error, Result};

/// Below this angle `exp`/`log` switch to their Taylor expansions.
pub const SMALL_ANGLE: f64 = 1e-8;

/// Frobenius drift of `R·Rᵀ − I` that triggers re-orthonormalization.
pub const REORTHO_TOLERANCE: f64 = 1e-9;

/// Drift beyond which a matrix is rejected as a rotation.
pub const ORTHO_REJECT: f64 = 1e-6;

pub type TangentVec3 = Vector3<f64>;

/// `[v]×` such that `[v]× u = v × u`.
#[inline]
pub fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Inverse of [`skew`] applied to the antisymmetric part of `m`.
#[inline]
pub fn vee(m: &Matrix3<f64>) -> Vector3<f64> {
    Vector3::new(m[(2, 1)] - m[(1, 2)], m[(0, 2)] - m[(2, 0)], m[(1, 0)] - m[(0, 1)]) * 0.5
}

fn orthogonality_drift(m: &Matrix3<f64>) -> f64 {
    (m * m.transpose() - Matrix3::identity()).norm()
}

/// Closest rotation in the Frobenius sense (polar factor of the SVD).
pub fn orthonormalize(m: &Matrix3<f64>) -> Matrix3<f64> {
    let svd = m.svd(true, true);
    let u = svd.u.expect("svd u");
    let v_t = svd.v_t.expect("svd v_t");
    let mut r = u * v_t;
    if r.determinant() < 0.0 {
        let mut u = u;
        u.column_mut(2).neg_mut();
        r = u * v_t;
    }
    r
}

/// A 3D rotation held as an orthonormal matrix with determinant +1.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rotation {
    matrix: Matrix3<f64>,
}

impl Default for Rotation {
    fn default() -> Self {
        Self::identity()
    }
}

impl Rotation {
    pub fn identity() -> Self {
        Self { matrix: Matrix3::identity() }
    }

    /// Validates `m` and snaps it onto SO(3) if the drift is small.
    pub fn from_matrix(m: Matrix3<f64>) -> Result<Self> {
        if !m.iter().all(|x| x.is_finite()) {
            return Err(Error::Degenerate("rotation matrix has non-finite entries".into()));
        }
        let drift = orthogonality_drift(&m);
        if drift > ORTHO_REJECT || m.determinant() <= 0.0 {
            return Err(Error::Degenerate(format!(
                "matrix is not a rotation (orthogonality drift {drift:.3e}, det {:.6})",
                m.determinant()
            )));
        }
        Ok(Self::from_matrix_unchecked(m))
    }

    pub(crate) fn from_matrix_unchecked(m: Matrix3<f64>) -> Self {
        if orthogonality_drift(&m) > REORTHO_TOLERANCE {
            Self { matrix: orthonormalize(&m) }
        } else {
            Self { matrix: m }
        }
    }

    #[inline]
    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.matrix
    }

    pub fn exp(phi: &Vector3<f64>) -> Self {
        Self { matrix: so3_exp_matrix(phi) }
    }

    /// Axis-angle vector with angle in `[0, π]`.
    pub fn log(&self) -> Vector3<f64> {
        so3_log_matrix(&self.matrix)
    }

    pub fn transpose(&self) -> Self {
        Self { matrix: self.matrix.transpose() }
    }

    pub fn inverse(&self) -> Self {
        self.transpose()
    }

    /// Geodesic angle to the identity, in radians.
    pub fn angle(&self) -> f64 {
        self.log().norm()
    }

    /// Geodesic distance between two rotations, in radians.
    pub fn angle_to(&self, other: &Rotation) -> f64 {
        (self.transpose() * *other).angle()
    }

    /// Right perturbation `R·Exp(δ)`.
    pub fn retract(&self, delta: &Vector3<f64>) -> Self {
        *self * Rotation::exp(delta)
    }

    /// `δ` such that `other.retract(δ) == self`.
    pub fn local(&self, other: &Rotation) -> Vector3<f64> {
        (other.transpose() * *self).log()
    }

    /// `R_z(yaw)·R_y(pitch)·R_x(roll)`.
    pub fn from_euler_zyx(yaw: f64, pitch: f64, roll: f64) -> Self {
        let r = Rotation3::from_euler_angles(roll, pitch, yaw);
        Self { matrix: *r.matrix() }
    }

    /// `(yaw, pitch, roll)` of the ZYX decomposition.
    pub fn to_euler_zyx(&self) -> (f64, f64, f64) {
        let (roll, pitch, yaw) = Rotation3::from_matrix_unchecked(self.matrix).euler_angles();
        (yaw, pitch, roll)
    }

    /// Unit quaternion as `[w, x, y, z]` with `w ≥ 0`.
    pub fn to_quaternion(&self) -> [f64; 4] {
        let q = UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(self.matrix));
        let s = if q.w < 0.0 { -1.0 } else { 1.0 };
        [s * q.w, s * q.i, s * q.j, s * q.k]
    }

    pub fn from_quaternion(wxyz: [f64; 4]) -> Result<Self> {
        let q = nalgebra::Quaternion::new(wxyz[0], wxyz[1], wxyz[2], wxyz[3]);
        let n = q.norm();
        if !n.is_finite() || n < 1e-9 {
            return Err(Error::Degenerate("zero-norm quaternion".into()));
        }
        let uq = UnitQuaternion::from_quaternion(q);
        Ok(Self { matrix: *uq.to_rotation_matrix().matrix() })
    }

    /// Geodesic interpolation: `alpha = 0` gives `self`, `1` gives `other`.
    pub fn interpolate(&self, other: &Rotation, alpha: f64) -> Self {
        let delta = other.local(self);
        self.retract(&(delta * alpha))
    }
}

impl Mul for Rotation {
    type Output = Rotation;

    fn mul(self, rhs: Rotation) -> Rotation {
        Rotation::from_matrix_unchecked(self.matrix * rhs.matrix)
    }
}

impl Mul<Vector3<f64>> for Rotation {
    type Output = Vector3<f64>;

    fn mul(self, rhs: Vector3<f64>) -> Vector3<f64> {
        self.matrix * rhs
    }
}

impl Mul<&Vector3<f64>> for &Rotation {
    type Output = Vector3<f64>;

    fn mul(self, rhs: &Vector3<f64>) -> Vector3<f64> {
        self.matrix * rhs
    }
}

fn so3_exp_matrix(phi: &Vector3<f64>) -> Matrix3<f64> {
    let theta2 = phi.norm_squared();
    let theta = theta2.sqrt();
    let k = skew(phi);
    if theta < SMALL_ANGLE {
        return Matrix3::identity() + k + 0.5 * k * k;
    }
    let a = theta.sin() / theta;
    let b = (1.0 - theta.cos()) / theta2;
    Matrix3::identity() + a * k + b * k * k
}

fn so3_log_matrix(r: &Matrix3<f64>) -> Vector3<f64> {
    let w = vee(r);
    let s = w.norm();
    let c = 0.5 * (r.trace() - 1.0);
    let theta = s.atan2(c);
    if theta < SMALL_ANGLE {
        // θ/sin θ ≈ 1 + θ²/6
        return w * (1.0 + theta * theta / 6.0);
    }
    if c > 0.0 || s > 1e-6 {
        return w * (theta / s);
    }
    // Near π: (R + Rᵀ)/2 − cos θ·I = (1 − cos θ)·a·aᵀ.
    let b = 0.5 * (r + r.transpose()) - Matrix3::identity() * c;
    let (mut best, mut best_val) = (0, b[(0, 0)]);
    for i in 1..3 {
        if b[(i, i)] > best_val {
            best = i;
            best_val = b[(i, i)];
        }
    }
    let mut axis: Vector3<f64> = b.column(best).into_owned() / best_val.max(f64::MIN_POSITIVE).sqrt();
    axis /= axis.norm();
    if axis.dot(&w) < 0.0 {
        axis = -axis;
    }
    axis * theta
}

/// Exponential map `so(3) → SO(3)`.
pub fn so3_exp(phi: &Vector3<f64>) -> Rotation {
    Rotation::exp(phi)
}

/// Logarithm map with input validation.
pub fn so3_log(r: &Matrix3<f64>) -> Result<Vector3<f64>> {
    let drift = orthogonality_drift(r);
    if drift > ORTHO_REJECT {
        return Err(Error::Degenerate(format!("orthogonality drift {drift:.3e}")));
    }
    Ok(so3_log_matrix(r))
}

/// Right Jacobian of SO(3).
pub fn right_jacobian(phi: &Vector3<f64>) -> Matrix3<f64> {
    let theta = phi.norm();
    let k = skew(phi);
    if theta < 1e-5 {
        return Matrix3::identity() - 0.5 * k + k * k / 6.0;
    }
    let t2 = theta * theta;
    Matrix3::identity() - (1.0 - theta.cos()) / t2 * k + (theta - theta.sin()) / (t2 * theta) * k * k
}

/// Inverse of [`right_jacobian`].
pub fn right_jacobian_inv(phi: &Vector3<f64>) -> Matrix3<f64> {
    let theta = phi.norm();
    let k = skew(phi);
    if theta < 1e-5 {
        return Matrix3::identity() + 0.5 * k + k * k / 12.0;
    }
    let t2 = theta * theta;
    Matrix3::identity()
        + 0.5 * k
        + (1.0 / t2 - (1.0 + theta.cos()) / (2.0 * theta * theta.sin())) * k * k
}

/// Rigid transform; `rotation` maps body-frame vectors into the parent frame.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Pose {
    pub rotation: Rotation,
    pub translation: Vector3<f64>,
}

impl Pose {
    pub fn new(rotation: Rotation, translation: Vector3<f64>) -> Self {
        Self { rotation, translation }
    }

    pub fn identity() -> Self {
        Self::default()
    }

    pub fn inverse(&self) -> Self {
        let rt = self.rotation.transpose();
        Self { rotation: rt, translation: -(rt * self.translation) }
    }

    /// `self ∘ other`.
    pub fn compose(&self, other: &Pose) -> Self {
        Self {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * *p + self.translation
    }

    /// `self⁻¹ ∘ other`.
    pub fn between(&self, other: &Pose) -> Self {
        self.inverse().compose(other)
    }
}

/// Rigid (no scale) least-squares alignment of matched point sets:
/// returns `T` minimizing `Σ‖T·estimate_i − reference_i‖²`.
pub fn align_points(estimate: &[Vector3<f64>], reference: &[Vector3<f64>]) -> Result<Pose> {
    if estimate.len() != reference.len() {
        return Err(Error::Degenerate(format!(
            "alignment needs matched sets ({} vs {})",
            estimate.len(),
            reference.len()
        )));
    }
    if estimate.len() < 3 {
        return Err(Error::TooFewSamples { needed: 3, got: estimate.len() });
    }
    let n = estimate.len() as f64;
    let mean_e = estimate.iter().sum::<Vector3<f64>>() / n;
    let mean_r = reference.iter().sum::<Vector3<f64>>() / n;
    let mut cov = Matrix3::zeros();
    for (e, r) in estimate.iter().zip(reference) {
        cov += (r - mean_r) * (e - mean_e).transpose();
    }
    let svd = cov.svd(true, true);
    let sv = svd.singular_values;
    let mut sorted = [sv[0], sv[1], sv[2]];
    sorted.sort_by(|a, b| b.total_cmp(a));
    if sorted[0] <= 0.0 || sorted[1] <= 1e-9 * sorted[0] {
        return Err(Error::Degenerate("point set is collinear or coincident".into()));
    }
    let u = svd.u.expect("svd u");
    let v_t = svd.v_t.expect("svd v_t");
    let mut d = Matrix3::identity();
    if (u * v_t).determinant() < 0.0 {
        // flip the axis of the smallest singular value
        let (imin, _) = sv.iter().enumerate().min_by(|a, b| a.1.total_cmp(b.1)).unwrap();
        d[(imin, imin)] = -1.0;
    }
    let r = u * d * v_t;
    let rotation = Rotation::from_matrix_unchecked(r);
    let translation = mean_r - rotation * mean_e;
    Ok(Pose { rotation, translation })
}

/// SE(3) alignment of two pose sequences matched by index (positions only).
pub fn umeyama_align(estimate: &[Pose], reference: &[Pose]) -> Result<Pose> {
    let e: Vec<_> = estimate.iter().map(|p| p.translation).collect();
    let r: Vec<_> = reference.iter().map(|p| p.translation).collect();
    align_points(&e, &r)
}
