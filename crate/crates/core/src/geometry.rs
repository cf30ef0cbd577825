//! Rigid transforms and unit quaternions.

use nalgebra::{Matrix3, Matrix4, Vector3};

use crate::error::{Error, Result};

/// Tolerance used when validating rotation blocks.
pub const ROTATION_TOLERANCE: f64 = 1e-9;

/// A rigid transform `p -> R p + t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Default for Pose {
    fn default() -> Self {
        Self::identity()
    }
}

impl Pose {
    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    /// Builds a pose, rejecting rotation blocks that are not proper rotations.
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self> {
        let pose = Self {
            rotation,
            translation,
        };
        let err = pose.orthonormality_error();
        if !err.is_finite()
            || err >= ROTATION_TOLERANCE
            || !translation.iter().all(|v| v.is_finite())
        {
            return Err(Error::InvalidPose(format!(
                "rotation deviates from SO(3) by {err:e}"
            )));
        }
        Ok(pose)
    }

    /// Assembles a pose without validating the rotation block.
    pub fn from_parts(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Self {
        Self {
            rotation,
            translation,
        }
    }

    pub fn from_translation(translation: Vector3<f64>) -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation,
        }
    }

    /// Rotation about +z by `angle` radians followed by `translation`.
    pub fn from_yaw(angle: f64, translation: Vector3<f64>) -> Self {
        Self {
            rotation: yaw_matrix(angle),
            translation,
        }
    }

    /// Rotation from an axis-angle vector (exact exponential map).
    pub fn from_axis_angle(rotation_vector: Vector3<f64>, translation: Vector3<f64>) -> Self {
        Self {
            rotation: exp_so3(&rotation_vector),
            translation,
        }
    }

    /// `max(|RᵀR − I|_∞, |det R − 1|)`.
    pub fn orthonormality_error(&self) -> f64 {
        let gram = self.rotation.transpose() * self.rotation - Matrix3::identity();
        let gram_err = gram.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
        gram_err.max((self.rotation.determinant() - 1.0).abs())
    }

    pub fn apply(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    /// `self ∘ other`: applies `other` first.
    pub fn compose(&self, other: &Pose) -> Pose {
        Pose {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> Pose {
        let rt = self.rotation.transpose();
        Pose {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    pub fn to_homogeneous(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }

    pub fn from_homogeneous(m: &Matrix4<f64>) -> Pose {
        Pose {
            rotation: m.fixed_view::<3, 3>(0, 0).into_owned(),
            translation: m.fixed_view::<3, 1>(0, 3).into_owned(),
        }
    }

    /// Rotation angle of `R` in radians, via the clamped trace formula.
    pub fn rotation_angle(&self) -> f64 {
        rotation_angle(&self.rotation)
    }

    /// Row-major `[R | t]` as 12 values (KITTI pose-line layout).
    pub fn to_row_major_3x4(&self) -> [f64; 12] {
        let r = &self.rotation;
        let t = &self.translation;
        [
            r[(0, 0)],
            r[(0, 1)],
            r[(0, 2)],
            t[0],
            r[(1, 0)],
            r[(1, 1)],
            r[(1, 2)],
            t[1],
            r[(2, 0)],
            r[(2, 1)],
            r[(2, 2)],
            t[2],
        ]
    }

    /// Inverse of [`Pose::to_row_major_3x4`]; no orthonormality check.
    pub fn from_row_major_3x4(v: &[f64; 12]) -> Pose {
        Pose {
            rotation: Matrix3::new(v[0], v[1], v[2], v[4], v[5], v[6], v[8], v[9], v[10]),
            translation: Vector3::new(v[3], v[7], v[11]),
        }
    }
}

pub fn yaw_matrix(angle: f64) -> Matrix3<f64> {
    let (s, c) = angle.sin_cos();
    Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0)
}

pub fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v[2], v[1], v[2], 0.0, -v[0], -v[1], v[0], 0.0)
}

/// Rodrigues' formula, with a Taylor expansion near zero.
pub fn exp_so3(w: &Vector3<f64>) -> Matrix3<f64> {
    let theta2 = w.norm_squared();
    let k = skew(w);
    let (a, b) = if theta2 < 1e-12 {
        (1.0 - theta2 / 6.0, 0.5 - theta2 / 24.0)
    } else {
        let theta = theta2.sqrt();
        (theta.sin() / theta, (1.0 - theta.cos()) / theta2)
    };
    Matrix3::identity() + k * a + k * k * b
}

pub fn rotation_angle(r: &Matrix3<f64>) -> f64 {
    let c = ((r.trace() - 1.0) * 0.5).clamp(-1.0, 1.0);
    c.acos()
}

/// Scalar-first unit quaternion `(a, b, c, d) = a + bi + cj + dk`, kept on
/// the `a ≥ 0` hemisphere.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UnitQuaternion {
    pub a: f64,
    pub b: f64,
    pub c: f64,
    pub d: f64,
}

/// Result of rebuilding a quaternion from its vector part.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RecoveredQuaternion {
    pub quaternion: UnitQuaternion,
    /// Set when the input vector had norm > 1 and was rescaled onto the sphere.
    pub clamped: bool,
}

impl UnitQuaternion {
    pub fn identity() -> Self {
        Self {
            a: 1.0,
            b: 0.0,
            c: 0.0,
            d: 0.0,
        }
    }

    /// Normalizes and flips onto the canonical hemisphere.
    pub fn new_normalized(a: f64, b: f64, c: f64, d: f64) -> Self {
        let n = (a * a + b * b + c * c + d * d).sqrt();
        let s = if a < 0.0 { -1.0 / n } else { 1.0 / n };
        Self {
            a: a * s,
            b: b * s,
            c: c * s,
            d: d * s,
        }
    }

    pub fn from_rotation(r: &Matrix3<f64>) -> Self {
        // Shepperd's method: branch on the largest diagonal term.
        let trace = r.trace();
        let (a, b, c, d);
        if trace > r[(0, 0)] && trace > r[(1, 1)] && trace > r[(2, 2)] {
            let s = (1.0 + trace).sqrt() * 2.0;
            a = 0.25 * s;
            b = (r[(2, 1)] - r[(1, 2)]) / s;
            c = (r[(0, 2)] - r[(2, 0)]) / s;
            d = (r[(1, 0)] - r[(0, 1)]) / s;
        } else if r[(0, 0)] > r[(1, 1)] && r[(0, 0)] > r[(2, 2)] {
            let s = (1.0 + r[(0, 0)] - r[(1, 1)] - r[(2, 2)]).sqrt() * 2.0;
            a = (r[(2, 1)] - r[(1, 2)]) / s;
            b = 0.25 * s;
            c = (r[(0, 1)] + r[(1, 0)]) / s;
            d = (r[(0, 2)] + r[(2, 0)]) / s;
        } else if r[(1, 1)] > r[(2, 2)] {
            let s = (1.0 + r[(1, 1)] - r[(0, 0)] - r[(2, 2)]).sqrt() * 2.0;
            a = (r[(0, 2)] - r[(2, 0)]) / s;
            b = (r[(0, 1)] + r[(1, 0)]) / s;
            c = 0.25 * s;
            d = (r[(1, 2)] + r[(2, 1)]) / s;
        } else {
            let s = (1.0 + r[(2, 2)] - r[(0, 0)] - r[(1, 1)]).sqrt() * 2.0;
            a = (r[(1, 0)] - r[(0, 1)]) / s;
            b = (r[(0, 2)] + r[(2, 0)]) / s;
            c = (r[(1, 2)] + r[(2, 1)]) / s;
            d = 0.25 * s;
        }
        Self::new_normalized(a, b, c, d)
    }

    pub fn from_pose(pose: &Pose) -> Self {
        Self::from_rotation(&pose.rotation)
    }

    pub fn to_rotation(&self) -> Matrix3<f64> {
        let (a, b, c, d) = (self.a, self.b, self.c, self.d);
        Matrix3::new(
            a * a + b * b - c * c - d * d,
            2.0 * (b * c - a * d),
            2.0 * (b * d + a * c),
            2.0 * (b * c + a * d),
            a * a - b * b + c * c - d * d,
            2.0 * (c * d - a * b),
            2.0 * (b * d - a * c),
            2.0 * (c * d + a * b),
            a * a - b * b - c * c + d * d,
        )
    }

    /// The `(b, c, d)` part, which is what the regression heads predict.
    pub fn vector_part(&self) -> Vector3<f64> {
        Vector3::new(self.b, self.c, self.d)
    }

    /// Rebuilds the quaternion from its vector part, with `a = +√(1 − |v|²)`.
    pub fn recover(v: &Vector3<f64>) -> RecoveredQuaternion {
        let n2 = v.norm_squared();
        if n2 > 1.0 {
            let v = v / n2.sqrt();
            return RecoveredQuaternion {
                quaternion: Self {
                    a: 0.0,
                    b: v[0],
                    c: v[1],
                    d: v[2],
                },
                clamped: true,
            };
        }
        RecoveredQuaternion {
            quaternion: Self {
                a: (1.0 - n2).sqrt(),
                b: v[0],
                c: v[1],
                d: v[2],
            },
            clamped: false,
        }
    }

    pub fn norm(&self) -> f64 {
        (self.a * self.a + self.b * self.b + self.c * self.c + self.d * self.d).sqrt()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::FRAC_PI_2;

    #[test]
    fn yaw_quarter_turn_maps_x_to_y() {
        let p = Pose::from_yaw(FRAC_PI_2, Vector3::zeros());
        let q = p.apply(&Vector3::new(1.0, 0.0, 0.0));
        assert!((q - Vector3::new(0.0, 1.0, 0.0)).norm() < 1e-12);
    }

    #[test]
    fn identity_quaternion() {
        let q = UnitQuaternion::from_pose(&Pose::identity());
        assert_eq!(q, UnitQuaternion::identity());
        let r = UnitQuaternion::recover(&Vector3::zeros());
        assert_eq!(r.quaternion, UnitQuaternion::identity());
        assert!(!r.clamped);
    }

    #[test]
    fn recover_clamps_long_vectors() {
        let r = UnitQuaternion::recover(&Vector3::new(2.0, 0.0, 0.0));
        assert!(r.clamped);
        assert!((r.quaternion.norm() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn half_turn_quaternions_stay_canonical() {
        for axis in [Vector3::x(), Vector3::y(), Vector3::z()] {
            let r = exp_so3(&(axis * std::f64::consts::PI));
            let q = UnitQuaternion::from_rotation(&r);
            assert!(q.a >= 0.0);
            assert!((q.to_rotation() - r).abs().max() < 1e-9);
        }
    }

    #[test]
    fn new_rejects_reflections() {
        let m = Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, -1.0));
        assert!(Pose::new(m, Vector3::zeros()).is_err());
    }
}
