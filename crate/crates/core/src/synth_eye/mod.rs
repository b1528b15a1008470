//! Stylised IR eye images with exact pupil labels, and the eye corpus
//! generator.

mod dataset;
mod render;

use nalgebra::{Vector2, Vector3};

pub use dataset::{
    eye_target, gen_eye_dataset, render_frame, state_from_target, synthesize_eye_frame, EyeDataConfig, EyeFrame,
    EyeSubject, LabelSource,
};
pub use render::{pupil_ellipse, render_eye, EyeRenderSpec, RenderedEye, GLINT_COUNT, IRIS_COLOURS};

use crate::error::{Error, Result};

pub const MAX_GAZE_DEG: f64 = 45.0;
pub const MIN_PUPIL: f64 = 8.0;
pub const MAX_PUPIL: f64 = 60.0;

/// The five regressed eye parameters. Angles in radians; pixel quantities
/// at the full IR frame resolution.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EyeState {
    pub pitch: f64,
    pub yaw: f64,
    /// Major-axis length of the pupil ellipse.
    pub pupil_size: f64,
    /// `(x = col, y = row)`.
    pub pupil_centre: Vector2<f64>,
}

impl EyeState {
    pub fn to_array(&self) -> [f64; 5] {
        [self.pitch, self.yaw, self.pupil_size, self.pupil_centre.x, self.pupil_centre.y]
    }

    pub fn from_array(a: [f64; 5]) -> Self {
        Self {
            pitch: a[0],
            yaw: a[1],
            pupil_size: a[2],
            pupil_centre: Vector2::new(a[3], a[4]),
        }
    }

    pub fn gaze(&self) -> Vector3<f64> {
        gaze_to_vector(self.pitch, self.yaw)
    }

    /// Range check used by the renderer.
    pub fn validate(&self) -> Result<()> {
        let lim = MAX_GAZE_DEG.to_radians() + 1e-12;
        if !(self.pitch.abs() <= lim && self.yaw.abs() <= lim) {
            return Err(Error::InvalidInput(format!(
                "gaze ({:.2}°, {:.2}°) outside ±{MAX_GAZE_DEG}°",
                self.pitch.to_degrees(),
                self.yaw.to_degrees()
            )));
        }
        if !(MIN_PUPIL..=MAX_PUPIL).contains(&self.pupil_size) {
            return Err(Error::InvalidInput(format!(
                "pupil size {} outside [{MIN_PUPIL}, {MAX_PUPIL}] px",
                self.pupil_size
            )));
        }
        if !self.pupil_centre.iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidInput("non-finite pupil centre".into()));
        }
        Ok(())
    }
}

/// Unit gaze direction: x right, y up, z toward the camera.
pub fn gaze_to_vector(pitch: f64, yaw: f64) -> Vector3<f64> {
    Vector3::new(pitch.cos() * yaw.sin(), pitch.sin(), pitch.cos() * yaw.cos())
}

/// Inverse of [`gaze_to_vector`] for any non-zero vector.
pub fn vector_to_gaze(v: &Vector3<f64>) -> (f64, f64) {
    let n = v.norm();
    ((v.y / n).clamp(-1.0, 1.0).asin(), v.x.atan2(v.z))
}

/// Angle between two gaze directions, in radians.
pub fn angular_error(a: (f64, f64), b: (f64, f64)) -> f64 {
    let (u, v) = (gaze_to_vector(a.0, a.1), gaze_to_vector(b.0, b.1));
    u.cross(&v).norm().atan2(u.dot(&v))
}
