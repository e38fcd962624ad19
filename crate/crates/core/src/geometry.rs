//! Rotation and pose algebra on SO(3), plus the two-angle gravity parametrization.
//!
//! Rotations are stored as plain 3×3 matrices. The tangent space is the
//! axis-angle vector `phi`, with `exp(phi)` rotating by `|phi|` radians about
//! `phi / |phi|`.

use std::ops::Mul;

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_GRAVITY: f64 = 9.81;

/// Below this angle `exp` switches to its Taylor series.
const SMALL_ANGLE: f64 = 1e-8;

pub fn hat(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

pub fn vee(m: &Matrix3<f64>) -> Vector3<f64> {
    Vector3::new(m[(2, 1)], m[(0, 2)], m[(1, 0)])
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Rotation(Matrix3<f64>);

impl Rotation {
    pub fn identity() -> Self {
        Rotation(Matrix3::identity())
    }

    /// Wraps a matrix that is already orthonormal with determinant +1.
    pub fn from_matrix_unchecked(m: Matrix3<f64>) -> Self {
        Rotation(m)
    }

    /// Projects an approximately orthonormal matrix onto SO(3).
    pub fn from_matrix(m: Matrix3<f64>) -> Result<Self> {
        if !m.iter().all(|x| x.is_finite()) {
            return Err(Error::InvalidArgument("non-finite rotation matrix".into()));
        }
        // Already orthonormal to rounding: keep the bits.
        let gram = m.transpose() * m - Matrix3::identity();
        if gram.amax() < 1e-12 && m.determinant() > 0.0 {
            return Ok(Rotation(m));
        }
        let r = Rotation(m).renormalized();
        if (r.0 - m).amax() > 1e-6 {
            return Err(Error::InvalidArgument(
                "matrix is not close to a rotation".into(),
            ));
        }
        Ok(r)
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.0
    }

    pub fn inverse(&self) -> Self {
        Rotation(self.0.transpose())
    }

    /// Closest rotation in the Frobenius sense (polar decomposition via SVD).
    pub fn renormalized(&self) -> Self {
        let svd = self.0.svd(true, true);
        let (u, v_t) = (svd.u.unwrap(), svd.v_t.unwrap());
        let mut r = u * v_t;
        if r.determinant() < 0.0 {
            let mut u = u;
            u.column_mut(2).neg_mut();
            r = u * v_t;
        }
        Rotation(r)
    }

    /// Rotation angle in radians, in `[0, π]`.
    pub fn angle(&self) -> f64 {
        log_so3(self).norm()
    }
}

impl Mul for Rotation {
    type Output = Rotation;
    fn mul(self, rhs: Rotation) -> Rotation {
        Rotation(self.0 * rhs.0)
    }
}

impl Mul<&Rotation> for &Rotation {
    type Output = Rotation;
    fn mul(self, rhs: &Rotation) -> Rotation {
        Rotation(self.0 * rhs.0)
    }
}

impl Mul<Vector3<f64>> for &Rotation {
    type Output = Vector3<f64>;
    fn mul(self, rhs: Vector3<f64>) -> Vector3<f64> {
        self.0 * rhs
    }
}

impl Mul<Vector3<f64>> for Rotation {
    type Output = Vector3<f64>;
    fn mul(self, rhs: Vector3<f64>) -> Vector3<f64> {
        self.0 * rhs
    }
}

/// Exponential map, checked for finite input.
pub fn try_exp_so3(phi: &Vector3<f64>) -> Result<Rotation> {
    if !phi.iter().all(|x| x.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "non-finite rotation vector {phi:?}"
        )));
    }
    Ok(exp_so3(phi))
}

/// Rodrigues' formula. Callers guarantee finite input; see [`try_exp_so3`].
pub fn exp_so3(phi: &Vector3<f64>) -> Rotation {
    let theta2 = phi.norm_squared();
    let theta = theta2.sqrt();
    let k = hat(phi);
    if theta < SMALL_ANGLE {
        return Rotation(Matrix3::identity() + k + 0.5 * k * k);
    }
    let a = theta.sin() / theta;
    let b = (1.0 - theta.cos()) / theta2;
    Rotation(Matrix3::identity() + a * k + b * k * k)
}

/// Logarithm map, returning `phi` with `|phi| <= π`.
pub fn log_so3(r: &Rotation) -> Vector3<f64> {
    let m = &r.0;
    let w = 0.5 * vee(&(m - m.transpose()));
    let s = w.norm();
    let c = ((m.trace() - 1.0) * 0.5).clamp(-1.0, 1.0);
    let theta = s.atan2(c);

    if c > -0.99 {
        // theta / sin(theta), series below 1e-4 rad
        let scale = if theta < 1e-4 {
            1.0 + theta * theta / 6.0
        } else {
            theta / s
        };
        return w * scale;
    }

    // Near π the skew part vanishes; recover the axis from the symmetric part.
    let sym = 0.5 * (m + m.transpose()) - Matrix3::identity() * c;
    let mut best = 0;
    for i in 1..3 {
        if sym[(i, i)] > sym[(best, best)] {
            best = i;
        }
    }
    let mut axis: Vector3<f64> = sym.column(best).into();
    axis /= axis.norm();
    if axis.dot(&w) < 0.0 {
        axis = -axis;
    }
    axis * theta
}

/// Right Jacobian of SO(3): `exp(phi + d) ≈ exp(phi) exp(Jr(phi) d)`.
pub fn right_jacobian(phi: &Vector3<f64>) -> Matrix3<f64> {
    let theta2 = phi.norm_squared();
    let theta = theta2.sqrt();
    let k = hat(phi);
    if theta < 1e-5 {
        return Matrix3::identity() - 0.5 * k + (1.0 / 6.0) * k * k;
    }
    Matrix3::identity() - ((1.0 - theta.cos()) / theta2) * k
        + ((theta - theta.sin()) / (theta2 * theta)) * k * k
}

pub fn right_jacobian_inv(phi: &Vector3<f64>) -> Matrix3<f64> {
    let theta2 = phi.norm_squared();
    let theta = theta2.sqrt();
    let k = hat(phi);
    if theta < 1e-5 {
        return Matrix3::identity() + 0.5 * k + (1.0 / 12.0) * k * k;
    }
    let coeff = 1.0 / theta2 - (1.0 + theta.cos()) / (2.0 * theta * theta.sin());
    Matrix3::identity() + 0.5 * k + coeff * k * k
}

/// Rigid transform `x -> rotation * x + translation`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub rotation: Rotation,
    pub translation: Vector3<f64>,
}

impl Pose {
    pub fn new(rotation: Rotation, translation: Vector3<f64>) -> Self {
        Pose {
            rotation,
            translation,
        }
    }

    pub fn identity() -> Self {
        Pose::new(Rotation::identity(), Vector3::zeros())
    }

    pub fn compose(&self, other: &Pose) -> Pose {
        Pose::new(
            self.rotation * other.rotation,
            self.rotation * other.translation + self.translation,
        )
    }

    pub fn inverse(&self) -> Pose {
        let rt = self.rotation.inverse();
        Pose::new(rt, -(rt * self.translation))
    }

    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * *p + self.translation
    }

    /// 4×4 homogeneous matrix, row-major.
    pub fn to_row_major(&self) -> [f64; 16] {
        let r = self.rotation.matrix();
        let t = &self.translation;
        [
            r[(0, 0)],
            r[(0, 1)],
            r[(0, 2)],
            t.x,
            r[(1, 0)],
            r[(1, 1)],
            r[(1, 2)],
            t.y,
            r[(2, 0)],
            r[(2, 1)],
            r[(2, 2)],
            t.z,
            0.0,
            0.0,
            0.0,
            1.0,
        ]
    }

    pub fn from_row_major(m: &[f64; 16]) -> Result<Pose> {
        let bottom = [m[12], m[13], m[14], m[15]];
        if bottom != [0.0, 0.0, 0.0, 1.0] {
            return Err(Error::InvalidArgument(format!(
                "homogeneous transform has bottom row {bottom:?}"
            )));
        }
        let r = Matrix3::new(m[0], m[1], m[2], m[4], m[5], m[6], m[8], m[9], m[10]);
        Ok(Pose::new(
            Rotation::from_matrix(r)?,
            Vector3::new(m[3], m[7], m[11]),
        ))
    }
}

impl Mul for Pose {
    type Output = Pose;
    fn mul(self, rhs: Pose) -> Pose {
        self.compose(&rhs)
    }
}

/// Gravity direction as two rotation angles applied to `(0, 0, -magnitude)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GravityParams {
    pub alpha: f64,
    pub beta: f64,
    pub magnitude: f64,
}

impl GravityParams {
    pub fn new(alpha: f64, beta: f64, magnitude: f64) -> Self {
        GravityParams {
            alpha,
            beta,
            magnitude,
        }
    }

    pub fn rotation(&self) -> Rotation {
        exp_so3(&Vector3::new(self.alpha, self.beta, 0.0))
    }

    /// Angles whose gravity vector points along `direction`.
    ///
    /// With `theta = |(alpha, beta)|`, the unit gravity direction is
    /// `(-beta sinθ/θ, alpha sinθ/θ, -cosθ)`; this inverts that map.
    pub fn from_direction(direction: &Vector3<f64>, magnitude: f64) -> Result<Self> {
        let n = direction.norm();
        if !(n.is_finite() && n > 0.0) {
            return Err(Error::InvalidArgument(
                "gravity direction must be a finite non-zero vector".into(),
            ));
        }
        let d = direction / n;
        let theta = (-d.z).clamp(-1.0, 1.0).acos();
        let horizontal = (d.x * d.x + d.y * d.y).sqrt();
        let (alpha, beta) = if horizontal < 1e-15 {
            // Straight down, or straight up about an arbitrary horizontal axis.
            (theta, 0.0)
        } else {
            (theta * d.y / horizontal, -theta * d.x / horizontal)
        };
        Ok(GravityParams::new(alpha, beta, magnitude))
    }
}

impl Default for GravityParams {
    fn default() -> Self {
        GravityParams::new(0.0, 0.0, DEFAULT_GRAVITY)
    }
}

pub fn gravity_vector(gp: &GravityParams) -> Vector3<f64> {
    gp.rotation() * Vector3::new(0.0, 0.0, -gp.magnitude)
}
