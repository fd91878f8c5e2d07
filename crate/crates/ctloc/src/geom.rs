//! Time, vector, and rotation primitives shared by every stage of the
//! estimator.
//!
//! Rotations are stored as unit quaternions and re-normalized after each
//! composition. The exponential and logarithm maps use series expansions
//! below [`SMALL_ANGLE`] so that round-trips stay accurate down to
//! machine precision for microradian rotations.

use nalgebra::{Matrix3, Quaternion, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Angle below which `exp_map`/`log_map` switch to their series forms.
pub const SMALL_ANGLE: f64 = 1e-8;

/// Time in seconds since the dataset epoch.
///
/// Streams handed to the estimator must be non-decreasing in `Timestamp`;
/// the ingestion stage enforces this.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Timestamp(f64);

impl Timestamp {
    pub fn new(seconds: f64) -> Self {
        Timestamp(seconds)
    }

    pub fn seconds(&self) -> f64 {
        self.0
    }

    /// Elapsed seconds from `earlier` to `self`.
    pub fn since(&self, earlier: Timestamp) -> f64 {
        self.0 - earlier.0
    }

    pub fn offset(&self, dt: f64) -> Timestamp {
        Timestamp(self.0 + dt)
    }

    pub fn is_finite(&self) -> bool {
        self.0.is_finite()
    }
}

impl From<f64> for Timestamp {
    fn from(seconds: f64) -> Self {
        Timestamp(seconds)
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum GeomError {
    #[error("matrix is not skew-symmetric: symmetric part has magnitude {0:.3e}")]
    NotSkewSymmetric(f64),
}

/// A rotation in SO(3), stored as a unit quaternion.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rotation {
    q: UnitQuaternion<f64>,
}

impl Default for Rotation {
    fn default() -> Self {
        Rotation::identity()
    }
}

impl Rotation {
    pub fn identity() -> Self {
        Rotation {
            q: UnitQuaternion::identity(),
        }
    }

    pub fn from_quaternion(w: f64, x: f64, y: f64, z: f64) -> Self {
        Rotation {
            q: UnitQuaternion::from_quaternion(Quaternion::new(w, x, y, z)),
        }
    }

    pub fn from_unit_quaternion(q: UnitQuaternion<f64>) -> Self {
        Rotation { q }
    }

    /// Rotation of `angle` radians about the world z axis.
    pub fn from_yaw(angle: f64) -> Self {
        exp_map(&Vector3::new(0.0, 0.0, angle))
    }

    pub fn unit_quaternion(&self) -> UnitQuaternion<f64> {
        self.q
    }

    pub fn matrix(&self) -> Matrix3<f64> {
        self.q.to_rotation_matrix().into_inner()
    }

    /// Composition `self * other`, re-normalized.
    pub fn compose(&self, other: &Rotation) -> Rotation {
        let q = self.q.into_inner() * other.q.into_inner();
        Rotation {
            q: UnitQuaternion::from_quaternion(q),
        }
    }

    pub fn inverse(&self) -> Rotation {
        Rotation { q: self.q.inverse() }
    }

    /// Rotate a vector.
    pub fn apply(&self, v: &Vector3<f64>) -> Vector3<f64> {
        self.q * v
    }

    /// Rotate a vector by the inverse rotation.
    pub fn apply_inverse(&self, v: &Vector3<f64>) -> Vector3<f64> {
        self.q.inverse_transform_vector(v)
    }

    /// Relative rotation `self⁻¹ * other`.
    pub fn between(&self, other: &Rotation) -> Rotation {
        self.inverse().compose(other)
    }

    /// Yaw component of the rotation vector.
    pub fn yaw_angle(&self) -> f64 {
        log_map(self).z
    }

    pub fn angle_to(&self, other: &Rotation) -> f64 {
        log_map(&self.between(other)).norm()
    }

    /// Spherical linear interpolation (`alpha` in [0, 1]).
    pub fn slerp(&self, other: &Rotation, alpha: f64) -> Rotation {
        let rel = log_map(&self.between(other));
        self.compose(&exp_map(&(alpha * rel)))
    }
}

/// A rigid pose: rotation plus translation in meters.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
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
        Pose::default()
    }
}

/// Skew-symmetric matrix `[v]×` such that `[v]× u = v × u`.
#[inline]
pub fn hat(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Inverse of [`hat`]. Rejects matrices whose symmetric part exceeds 1e-9.
///
/// Extraction averages the off-diagonal pairs, so symmetric noise well
/// below the tolerance cancels.
pub fn vee(m: &Matrix3<f64>) -> Result<Vector3<f64>, GeomError> {
    let mut worst: f64 = 0.0;
    for i in 0..3 {
        worst = worst.max(m[(i, i)].abs());
        for j in (i + 1)..3 {
            worst = worst.max(0.5 * (m[(i, j)] + m[(j, i)]).abs());
        }
    }
    if worst > 1e-9 {
        return Err(GeomError::NotSkewSymmetric(worst));
    }
    Ok(Vector3::new(
        0.5 * (m[(2, 1)] - m[(1, 2)]),
        0.5 * (m[(0, 2)] - m[(2, 0)]),
        0.5 * (m[(1, 0)] - m[(0, 1)]),
    ))
}

/// Exponential map: axis-angle vector (radians) to rotation.
///
/// `exp_map(0)` is the identity. Below [`SMALL_ANGLE`] the half-angle
/// sine and cosine come from their Taylor series.
pub fn exp_map(v: &Vector3<f64>) -> Rotation {
    let theta_sq = v.norm_squared();
    let (w, s) = if theta_sq < SMALL_ANGLE * SMALL_ANGLE {
        // cos(θ/2) ≈ 1 − θ²/8, sin(θ/2)/θ ≈ 1/2 − θ²/48
        (1.0 - theta_sq / 8.0, 0.5 - theta_sq / 48.0)
    } else {
        let theta = theta_sq.sqrt();
        ((0.5 * theta).cos(), (0.5 * theta).sin() / theta)
    };
    let q = Quaternion::new(w, s * v.x, s * v.y, s * v.z);
    Rotation {
        q: UnitQuaternion::from_quaternion(q),
    }
}

/// Logarithm map: principal axis-angle vector with norm ≤ π.
///
/// At exactly π the quaternion sign is ambiguous; the axis sign is chosen
/// so that its largest-magnitude component is positive.
pub fn log_map(r: &Rotation) -> Vector3<f64> {
    let q = r.q.into_inner();
    // Canonicalize to w ≥ 0 so the angle is principal.
    let (w, mut xyz) = if q.w < 0.0 {
        (-q.w, -q.imag())
    } else {
        (q.w, q.imag())
    };
    let n = xyz.norm();
    if n < SMALL_ANGLE {
        // 2·atan(n/w)/n ≈ (2/w)(1 − n²/(3w²))
        let w = w.max(f64::MIN_POSITIVE);
        return xyz * (2.0 / w) * (1.0 - n * n / (3.0 * w * w));
    }
    if w == 0.0 {
        // Angle exactly π: pick the sign that makes the largest-magnitude
        // axis component positive.
        let axis = xyz / n;
        let lead = (0..3)
            .max_by(|&a, &b| axis[a].abs().partial_cmp(&axis[b].abs()).unwrap())
            .unwrap();
        if axis[lead] < 0.0 {
            xyz = -xyz;
        }
    }
    let angle = 2.0 * n.atan2(w);
    xyz * (angle / n)
}

/// Right Jacobian of the SO(3) exponential map.
///
/// `Exp(φ + δ) ≈ Exp(φ)·Exp(Jr(φ)·δ)` for small `δ`.
pub fn right_jacobian(phi: &Vector3<f64>) -> Matrix3<f64> {
    let theta_sq = phi.norm_squared();
    let k = hat(phi);
    if theta_sq < SMALL_ANGLE * SMALL_ANGLE {
        return Matrix3::identity() - 0.5 * k + (1.0 / 6.0) * k * k;
    }
    let theta = theta_sq.sqrt();
    Matrix3::identity() - ((1.0 - theta.cos()) / theta_sq) * k
        + ((theta - theta.sin()) / (theta_sq * theta)) * (k * k)
}

/// Inverse of the right Jacobian of the SO(3) exponential map.
pub fn right_jacobian_inv(phi: &Vector3<f64>) -> Matrix3<f64> {
    let theta_sq = phi.norm_squared();
    let k = hat(phi);
    if theta_sq < SMALL_ANGLE * SMALL_ANGLE {
        return Matrix3::identity() + 0.5 * k + (1.0 / 12.0) * k * k;
    }
    let theta = theta_sq.sqrt();
    let coeff = 1.0 / theta_sq - (1.0 + theta.cos()) / (2.0 * theta * theta.sin());
    Matrix3::identity() + 0.5 * k + coeff * (k * k)
}
