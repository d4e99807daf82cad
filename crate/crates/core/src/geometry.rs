//! Rigid-body pose algebra.
//!
//! Every pose in the pipeline is a [`Pose`]: a translation in meters plus a
//! unit quaternion stored as `(w, x, y, z)`. Quaternions are kept in the
//! canonical half of the double cover (`w >= 0`) and renormalized after every
//! operation, so two poses describing the same transform compare equal
//! component-wise up to rounding.

use nalgebra::{Matrix3, Matrix4, Quaternion, Unit, UnitQuaternion, Vector3};
use std::f64::consts::PI;

/// Allowed deviation of a stored quaternion norm from one.
pub const UNIT_NORM_TOLERANCE: f64 = 1e-9;

/// Below this rotation-vector magnitude the small-angle series are used.
const SMALL_ANGLE: f64 = 1e-8;

/// A rigid transform: position in meters and orientation as a unit
/// quaternion with non-negative scalar part.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Pose {
    position: Vector3<f64>,
    orientation: UnitQuaternion<f64>,
}

/// A small rigid displacement: linear part in meters, angular part as a
/// rotation vector in radians.
#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub struct Twist {
    pub linear: Vector3<f64>,
    pub angular: Vector3<f64>,
}

impl Twist {
    pub fn new(linear: Vector3<f64>, angular: Vector3<f64>) -> Self {
        Self { linear, angular }
    }

    pub fn is_finite(&self) -> bool {
        self.linear.iter().chain(self.angular.iter()).all(|v| v.is_finite())
    }
}

/// Error returned when raw components do not form a valid pose.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum PoseError {
    #[error("pose component is not finite")]
    NonFinite,
    #[error("quaternion norm {0} is not within tolerance of 1")]
    NotUnit(f64),
    #[error("quaternion scalar part is negative")]
    NotCanonical,
}

fn canonical(q: Quaternion<f64>) -> UnitQuaternion<f64> {
    let q = if q.w < 0.0 { -q } else { q };
    UnitQuaternion::new_normalize(q)
}

impl Default for Pose {
    fn default() -> Self {
        Self::identity()
    }
}

impl Pose {
    pub fn identity() -> Self {
        Self {
            position: Vector3::zeros(),
            orientation: UnitQuaternion::identity(),
        }
    }

    /// Builds a pose from a position and any non-zero quaternion; the
    /// quaternion is normalized and flipped into canonical form.
    pub fn new(position: Vector3<f64>, orientation: Quaternion<f64>) -> Self {
        Self {
            position,
            orientation: canonical(orientation),
        }
    }

    pub fn from_parts(position: Vector3<f64>, orientation: UnitQuaternion<f64>) -> Self {
        Self::new(position, orientation.into_inner())
    }

    /// Validates raw `(w, x, y, z)` components without modifying them.
    ///
    /// Used by the wire decoders, which must reproduce encoded values bit for
    /// bit.
    pub fn try_from_raw(position: [f64; 3], wxyz: [f64; 4]) -> Result<Self, PoseError> {
        if position.iter().chain(wxyz.iter()).any(|v| !v.is_finite()) {
            return Err(PoseError::NonFinite);
        }
        let [w, x, y, z] = wxyz;
        let norm = (w * w + x * x + y * y + z * z).sqrt();
        if (norm - 1.0).abs() > UNIT_NORM_TOLERANCE {
            return Err(PoseError::NotUnit(norm));
        }
        if w < 0.0 {
            return Err(PoseError::NotCanonical);
        }
        Ok(Self {
            position: Vector3::from(position),
            orientation: UnitQuaternion::new_unchecked(Quaternion::new(w, x, y, z)),
        })
    }

    pub fn translation(x: f64, y: f64, z: f64) -> Self {
        Self {
            position: Vector3::new(x, y, z),
            orientation: UnitQuaternion::identity(),
        }
    }

    pub fn rotation(axis: Vector3<f64>, angle: f64) -> Self {
        Self::from_parts(
            Vector3::zeros(),
            UnitQuaternion::from_axis_angle(&Unit::new_normalize(axis), angle),
        )
    }

    pub fn rot_x(angle: f64) -> Self {
        Self::rotation(Vector3::x(), angle)
    }

    pub fn rot_y(angle: f64) -> Self {
        Self::rotation(Vector3::y(), angle)
    }

    pub fn rot_z(angle: f64) -> Self {
        Self::rotation(Vector3::z(), angle)
    }

    /// Roll-pitch-yaw (fixed axes X, then Y, then Z), radians.
    pub fn from_rpy(position: Vector3<f64>, roll: f64, pitch: f64, yaw: f64) -> Self {
        Self::from_parts(position, UnitQuaternion::from_euler_angles(roll, pitch, yaw))
    }

    pub fn position(&self) -> Vector3<f64> {
        self.position
    }

    pub fn orientation(&self) -> UnitQuaternion<f64> {
        self.orientation
    }

    /// Quaternion components in storage order `(w, x, y, z)`.
    pub fn wxyz(&self) -> [f64; 4] {
        let q = self.orientation.quaternion();
        [q.w, q.i, q.j, q.k]
    }

    pub fn xyz(&self) -> [f64; 3] {
        [self.position.x, self.position.y, self.position.z]
    }

    pub fn with_position(&self, position: Vector3<f64>) -> Self {
        Self {
            position,
            orientation: self.orientation,
        }
    }

    pub fn with_orientation(&self, orientation: UnitQuaternion<f64>) -> Self {
        Self::from_parts(self.position, orientation)
    }

    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        self.orientation.to_rotation_matrix().into_inner()
    }

    pub fn to_homogeneous(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation_matrix());
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.position);
        m
    }

    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.orientation * p + self.position
    }

    pub fn is_finite(&self) -> bool {
        self.position.iter().all(|v| v.is_finite())
            && self.wxyz().iter().all(|v| v.is_finite())
    }

    /// Distance between positions plus geodesic angle between orientations.
    pub fn distance(&self, other: &Pose) -> (f64, f64) {
        let err = error_twist(self, other);
        (err.linear.norm(), err.angular.norm())
    }

    pub fn approx_eq(&self, other: &Pose, pos_tol: f64, rot_tol: f64) -> bool {
        let (dp, dr) = self.distance(other);
        dp <= pos_tol && dr <= rot_tol
    }
}

/// `a ∘ b`: the transform `b` expressed in frame `a`.
pub fn compose(a: &Pose, b: &Pose) -> Pose {
    Pose {
        position: a.position + a.orientation * b.position,
        orientation: canonical(a.orientation.quaternion() * b.orientation.quaternion()),
    }
}

pub fn inverse(p: &Pose) -> Pose {
    let inv = p.orientation.inverse();
    Pose {
        position: -(inv * p.position),
        orientation: canonical(*inv.quaternion()),
    }
}

/// Pose of `current` relative to `origin`: `inverse(origin) ∘ current`.
pub fn delta(origin: &Pose, current: &Pose) -> Pose {
    compose(&inverse(origin), current)
}

/// Rotation vector (axis times angle, angle in `[0, π]`) of a unit
/// quaternion.
///
/// At exactly π the quaternion and its negation are the same rotation and
/// both have `w == 0`; the result is then signed so that its
/// largest-magnitude component is positive.
pub fn log_so3(q: &UnitQuaternion<f64>) -> Vector3<f64> {
    let q = q.quaternion();
    let (w, v) = if q.w < 0.0 {
        (-q.w, -q.imag())
    } else {
        (q.w, q.imag())
    };
    let s = v.norm();
    if s < SMALL_ANGLE {
        // 2·atan2(s, w)/s ≈ (2/w)(1 − s²/(3w²))
        return v * (2.0 / w) * (1.0 - s * s / (3.0 * w * w));
    }
    let angle = 2.0 * s.atan2(w);
    let mut out = v * (angle / s);
    if w == 0.0 {
        let idx = out.iamax();
        if out[idx] < 0.0 {
            out = -out;
        }
    }
    out
}

/// Unit quaternion of a rotation vector, canonicalized to `w >= 0`.
pub fn exp_so3(omega: &Vector3<f64>) -> UnitQuaternion<f64> {
    let angle = omega.norm();
    let half = 0.5 * angle;
    let (w, k) = if angle < SMALL_ANGLE {
        (1.0 - angle * angle / 8.0, 0.5 - angle * angle / 48.0)
    } else {
        (half.cos(), half.sin() / angle)
    };
    canonical(Quaternion::new(w, omega.x * k, omega.y * k, omega.z * k))
}

/// Error that moves `current` onto `target`, expressed in the base frame:
/// position difference and the rotation vector of `R_target · R_currentᵀ`.
pub fn error_twist(current: &Pose, target: &Pose) -> Twist {
    let rot = target.orientation * current.orientation.inverse();
    Twist {
        linear: target.position - current.position,
        angular: log_so3(&rot),
    }
}

/// Geodesic interpolation from `from` toward `to` by fraction `t ∈ [0, 1]`.
pub fn slerp(from: &UnitQuaternion<f64>, to: &UnitQuaternion<f64>, t: f64) -> UnitQuaternion<f64> {
    let rel = log_so3(&(from.inverse() * to));
    canonical((from * exp_so3(&(rel * t))).into_inner())
}

/// Wraps an angle into `(-π, π]`.
pub fn wrap_angle(a: f64) -> f64 {
    let mut r = a.rem_euclid(2.0 * PI);
    if r > PI {
        r -= 2.0 * PI;
    }
    r
}
