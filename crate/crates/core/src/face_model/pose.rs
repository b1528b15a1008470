use nalgebra::{Matrix3, Rotation3, Vector2, Vector3};

use crate::error::{Error, Result};

const ROTATION_TOLERANCE: f64 = 1e-10;

/// Rigid weak-perspective pose `{R, t, s}`: a 3D rotation, an image-plane
/// translation in pixels and a positive scale.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    rotation: Matrix3<f64>,
    translation: Vector2<f64>,
    scale: f64,
}

impl Pose {
    /// Rejects matrices that are not proper rotations within 1e-10 and
    /// non-positive or non-finite scales.
    pub fn new(rotation: Matrix3<f64>, translation: Vector2<f64>, scale: f64) -> Result<Self> {
        if !(scale > 0.0) || !scale.is_finite() {
            return Err(Error::InvalidPose(format!("scale must be positive, got {scale}")));
        }
        if rotation.iter().chain(translation.iter()).any(|v| !v.is_finite()) {
            return Err(Error::InvalidPose("non-finite entry".into()));
        }
        let ortho = (rotation.transpose() * rotation - Matrix3::identity()).amax();
        if ortho > ROTATION_TOLERANCE {
            return Err(Error::InvalidPose(format!(
                "rotation is not orthogonal (max |RᵀR − I| = {ortho:e})"
            )));
        }
        let det = rotation.determinant();
        if (det - 1.0).abs() > ROTATION_TOLERANCE {
            return Err(Error::InvalidPose(format!("rotation determinant {det} ≠ 1")));
        }
        Ok(Self {
            rotation,
            translation,
            scale,
        })
    }

    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector2::zeros(),
            scale: 1.0,
        }
    }

    /// Yaw about +y, then pitch about +x, then roll about +z (all radians).
    pub fn from_angles(yaw: f64, pitch: f64, roll: f64, translation: Vector2<f64>, scale: f64) -> Result<Self> {
        let r = Rotation3::from_axis_angle(&Vector3::z_axis(), roll)
            * Rotation3::from_axis_angle(&Vector3::x_axis(), pitch)
            * Rotation3::from_axis_angle(&Vector3::y_axis(), yaw);
        Self::new(*r.matrix(), translation, scale)
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> Vector2<f64> {
        self.translation
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn with_translation(&self, translation: Vector2<f64>) -> Self {
        Self {
            translation,
            ..*self
        }
    }

    pub fn with_scale(&self, scale: f64) -> Result<Self> {
        Self::new(self.rotation, self.translation, scale)
    }

    /// `s · [I₂ 0] · R · v + t`.
    #[inline]
    pub fn project(&self, v: &Vector3<f64>) -> Vector2<f64> {
        let r = &self.rotation;
        Vector2::new(
            self.scale * (r[(0, 0)] * v.x + r[(0, 1)] * v.y + r[(0, 2)] * v.z) + self.translation.x,
            self.scale * (r[(1, 0)] * v.x + r[(1, 1)] * v.y + r[(1, 2)] * v.z) + self.translation.y,
        )
    }

    /// Depth of `v` along the viewing axis; larger values are nearer the viewer.
    #[inline]
    pub fn depth(&self, v: &Vector3<f64>) -> f64 {
        let r = &self.rotation;
        r[(2, 0)] * v.x + r[(2, 1)] * v.y + r[(2, 2)] * v.z
    }

    /// Row-major rotation (9), translation (2), scale (1).
    pub fn to_array(&self) -> [f64; 12] {
        let r = &self.rotation;
        [
            r[(0, 0)],
            r[(0, 1)],
            r[(0, 2)],
            r[(1, 0)],
            r[(1, 1)],
            r[(1, 2)],
            r[(2, 0)],
            r[(2, 1)],
            r[(2, 2)],
            self.translation.x,
            self.translation.y,
            self.scale,
        ]
    }

    pub fn from_array(a: &[f64]) -> Result<Self> {
        if a.len() != 12 {
            return Err(Error::Dimension {
                what: "pose record",
                expected: 12,
                got: a.len(),
            });
        }
        Self::new(
            Matrix3::from_row_slice(&a[..9]),
            Vector2::new(a[9], a[10]),
            a[11],
        )
    }
}

/// Free-function form of [`Pose::project`].
pub fn project(pose: &Pose, vertex: &Vector3<f64>) -> Vector2<f64> {
    pose.project(vertex)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::FRAC_PI_2;

    #[test]
    fn identity_drops_z() {
        let p = Pose::identity();
        assert_eq!(p.project(&Vector3::new(1.0, 2.0, 3.0)), Vector2::new(1.0, 2.0));
    }

    #[test]
    fn scale_then_translate() {
        let p = Pose::new(Matrix3::identity(), Vector2::new(10.0, 20.0), 2.0).unwrap();
        assert_eq!(p.project(&Vector3::new(1.0, 2.0, 3.0)), Vector2::new(12.0, 24.0));
    }

    #[test]
    fn quarter_turn_about_z() {
        let p = Pose::from_angles(0.0, 0.0, FRAC_PI_2, Vector2::zeros(), 1.0).unwrap();
        let q = p.project(&Vector3::new(1.0, 0.0, 0.0));
        assert!((q - Vector2::new(0.0, 1.0)).amax() < 1e-12);
    }

    #[test]
    fn non_orthogonal_rotation_rejected() {
        let mut m = Matrix3::identity();
        m[(0, 1)] = 1e-6;
        assert!(Pose::new(m, Vector2::zeros(), 1.0).is_err());
        let reflect = Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, -1.0));
        assert!(Pose::new(reflect, Vector2::zeros(), 1.0).is_err());
        assert!(Pose::new(Matrix3::identity(), Vector2::zeros(), 0.0).is_err());
    }

    #[test]
    fn array_round_trip() {
        let p = Pose::from_angles(0.3, -0.2, 0.1, Vector2::new(4.0, 5.0), 1.7).unwrap();
        assert_eq!(Pose::from_array(&p.to_array()).unwrap(), p);
    }
}
