use std::f64::consts::PI;

use nalgebra::{Vector2, Vector3};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::EyeState;
use crate::error::{Error, Result};
use crate::image::GrayImage;
use crate::pupil::EllipseFit;
use crate::seed;

pub const GLINT_COUNT: usize = 6;
pub const IRIS_COLOURS: usize = 20;
const GLINT_VALUE: u8 = 255;

/// Appearance and camera geometry of one eye.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EyeRenderSpec {
    pub rows: usize,
    pub cols: usize,
    /// Selects the iris intensity, `0..20`, darker to lighter.
    pub iris_color_index: usize,
    /// Glint centres, `(x, y)` pixels.
    pub glints: [[f64; 2]; GLINT_COUNT],
    pub glint_radius: f64,
    pub sclera: u8,
    pub pupil: u8,
    /// Uniform per-pixel noise amplitude.
    pub noise: u8,
    /// Projected eyeball rotation centre and radius, pixels.
    pub eyeball_centre: [f64; 2],
    pub eyeball_radius: f64,
    pub iris_radius: f64,
    /// Direction from the eye to the camera as `(pitch, yaw)` radians in
    /// the gaze frame; `(0, 0)` puts the camera on the straight-ahead axis.
    pub camera_tilt: [f64; 2],
    pub seed: u64,
}

impl Default for EyeRenderSpec {
    fn default() -> Self {
        let (rows, cols) = (240, 320);
        let c = [(cols as f64 - 1.0) / 2.0, (rows as f64 - 1.0) / 2.0];
        Self {
            rows,
            cols,
            iris_color_index: 8,
            glints: hex_ring(c, 38.0),
            glint_radius: 2.0,
            sclera: 205,
            pupil: 22,
            noise: 6,
            eyeball_centre: c,
            eyeball_radius: 110.0,
            iris_radius: 48.0,
            camera_tilt: [0.0, 0.0],
            seed: 0,
        }
    }
}

pub(crate) fn hex_ring(centre: [f64; 2], radius: f64) -> [[f64; 2]; GLINT_COUNT] {
    std::array::from_fn(|k| {
        let a = PI / 6.0 + k as f64 * PI / 3.0;
        [centre[0] + radius * a.cos(), centre[1] + radius * a.sin()]
    })
}

impl EyeRenderSpec {
    pub fn iris(&self) -> u8 {
        (70 + 5 * self.iris_color_index.min(IRIS_COLOURS - 1)) as u8
    }

    pub fn image_centre(&self) -> Vector2<f64> {
        Vector2::new((self.cols as f64 - 1.0) / 2.0, (self.rows as f64 - 1.0) / 2.0)
    }

    pub fn validate(&self) -> Result<()> {
        if self.rows < 16 || self.cols < 16 {
            return Err(Error::InvalidInput("eye image too small".into()));
        }
        if self.iris_color_index >= IRIS_COLOURS {
            return Err(Error::InvalidInput(format!(
                "iris colour index {} outside 0..{IRIS_COLOURS}",
                self.iris_color_index
            )));
        }
        if !(self.pupil < self.iris() && self.iris() < self.sclera) {
            return Err(Error::InvalidInput("intensities must satisfy pupil < iris < sclera".into()));
        }
        if u16::from(self.sclera) + u16::from(self.noise) >= u16::from(GLINT_VALUE) {
            return Err(Error::InvalidInput("sclera plus noise must stay below glint level".into()));
        }
        if !(self.eyeball_radius > 0.0 && self.iris_radius > 0.0 && self.glint_radius > 0.0) {
            return Err(Error::InvalidInput("radii must be positive".into()));
        }
        Ok(())
    }

    /// Gaze direction expressed in the camera frame (x right, y up, z from
    /// the eye toward the camera).
    pub fn camera_gaze(&self, pitch: f64, yaw: f64) -> Vector3<f64> {
        let g = super::gaze_to_vector(pitch, yaw);
        let z = super::gaze_to_vector(self.camera_tilt[0], self.camera_tilt[1]);
        let x = Vector3::y().cross(&z).normalize();
        let y = z.cross(&x);
        Vector3::new(g.dot(&x), g.dot(&y), g.dot(&z))
    }

    /// Where the pupil centre projects for a gaze direction.
    pub fn pupil_centre_for(&self, pitch: f64, yaw: f64) -> Vector2<f64> {
        let g = self.camera_gaze(pitch, yaw);
        Vector2::from(self.eyeball_centre) + self.eyeball_radius * Vector2::new(g.x, -g.y)
    }

    pub fn state_for(&self, pitch: f64, yaw: f64, pupil_size: f64) -> EyeState {
        EyeState {
            pitch,
            yaw,
            pupil_size,
            pupil_centre: self.pupil_centre_for(pitch, yaw),
        }
    }
}

/// A rendered frame with the exact pupil ellipse that was drawn.
#[derive(Debug, Clone)]
pub struct RenderedEye {
    pub image: GrayImage,
    pub ellipse: EllipseFit,
}

/// Pupil ellipse of a state: major axis `pupil_size`, minor axis along the
/// image-plane gaze tilt, foreshortened by `cos(inclination)` where the
/// inclination is measured from the camera axis.
pub fn pupil_ellipse(state: &EyeState, spec: &EyeRenderSpec) -> Result<EllipseFit> {
    let g = spec.camera_gaze(state.pitch, state.yaw);
    let tilt = Vector2::new(g.x, -g.y);
    let orientation = if tilt.norm() > 1e-12 {
        tilt.y.atan2(tilt.x) + PI / 2.0
    } else {
        0.0
    };
    let a = state.pupil_size / 2.0;
    EllipseFit::new(state.pupil_centre, a, a * g.z.clamp(0.0, 1.0), orientation)
}

/// Sclera background, foreshortened iris and pupil ellipses sharing the
/// pupil centre, seeded uniform noise, then six saturated glints.
pub fn render_eye(state: &EyeState, spec: &EyeRenderSpec) -> Result<RenderedEye> {
    state.validate()?;
    spec.validate()?;
    let pupil = pupil_ellipse(state, spec)?;
    let iris = EllipseFit::new(
        pupil.centre,
        spec.iris_radius,
        spec.iris_radius * pupil.axis_ratio(),
        pupil.orientation,
    )?;
    let mut rng = seed::rng(spec.seed, &[seed::STREAM_NOISE]);
    let noise = i16::from(spec.noise);
    let mut image = GrayImage::new(spec.rows, spec.cols, spec.sclera);
    for r in 0..spec.rows {
        for c in 0..spec.cols {
            let p = Vector2::new(c as f64, r as f64);
            let base = if pupil.contains(p) {
                spec.pupil
            } else if iris.contains(p) {
                spec.iris()
            } else {
                spec.sclera
            };
            let n = if noise > 0 { rng.random_range(-noise..=noise) } else { 0 };
            image.set(r, c, (i16::from(base) + n).clamp(0, 254) as u8);
        }
    }
    let rad = spec.glint_radius;
    for g in &spec.glints {
        let (r0, r1) = ((g[1] - rad).floor().max(0.0) as usize, (g[1] + rad).ceil() as usize);
        let (c0, c1) = ((g[0] - rad).floor().max(0.0) as usize, (g[0] + rad).ceil() as usize);
        for r in r0..=r1.min(spec.rows - 1) {
            for c in c0..=c1.min(spec.cols - 1) {
                if (c as f64 - g[0]).hypot(r as f64 - g[1]) <= rad {
                    image.set(r, c, GLINT_VALUE);
                }
            }
        }
    }
    Ok(RenderedEye { image, ellipse: pupil })
}
