//! Classical IR pupil tracker: darkest-box seeding, marker watershed,
//! morphological refinement, direct ellipse fitting, and the ellipse
//! axis-ratio gaze baseline.

mod ellipse;
mod segment;

use std::path::Path;

use nalgebra::{Vector2, Vector3};

pub use ellipse::{fit_ellipse, EllipseFit};
pub(crate) use ellipse::wrap_pi;
pub use segment::{
    box_sums, darkest_point, gradient_magnitude, pupil_markers, refine, segment_pupil, watershed, BinaryMask,
    PupilMask, BRIGHT_MARGIN, LABEL_BACKGROUND, LABEL_NONE, LABEL_PUPIL,
};

use crate::error::Result;
use crate::image::GrayImage;
use crate::synth_eye::vector_to_gaze;

/// Pupil centre and size (full major-axis length) of a fit.
pub fn pupil_labels(fit: &EllipseFit) -> (Vector2<f64>, f64) {
    (fit.centre, 2.0 * fit.semi_major)
}

/// Gaze from the pupil's apparent foreshortening: inclination
/// `arccos(b/a)` along the minor axis, signed toward the displacement of
/// the pupil centre from `image_centre`.
pub fn gaze_baseline(fit: &EllipseFit, image_centre: Vector2<f64>) -> (f64, f64) {
    let theta = fit.axis_ratio().clamp(0.0, 1.0).acos();
    let mut tilt = fit.minor_axis();
    if tilt.dot(&(fit.centre - image_centre)) < 0.0 {
        tilt = -tilt;
    }
    let g = Vector3::new(theta.sin() * tilt.x, -theta.sin() * tilt.y, theta.cos());
    vector_to_gaze(&g)
}

/// Intermediate and final results of one tracker pass.
#[derive(Debug, Clone)]
pub struct PupilTrack {
    pub seed: (usize, usize),
    pub mask: PupilMask,
    pub fit: EllipseFit,
}

/// Full tracker on one IR frame. The ellipse is fitted to the mask's
/// crack boundary (pixel-edge midpoints), which sits on the true region
/// edge rather than half a pixel inside it.
pub fn track_pupil(image: &GrayImage) -> Result<PupilTrack> {
    let seed = darkest_point(image)?;
    let mask = segment_pupil(image, seed)?;
    let fit = fit_ellipse(&mask.mask.crack_points())?;
    Ok(PupilTrack { seed, mask, fit })
}

/// Tracker plus baseline gaze about the image centre.
pub fn baseline_eye(image: &GrayImage) -> Result<(PupilTrack, f64, f64)> {
    let track = track_pupil(image)?;
    let centre = Vector2::new((image.cols() as f64 - 1.0) / 2.0, (image.rows() as f64 - 1.0) / 2.0);
    let (pitch, yaw) = gaze_baseline(&track.fit, centre);
    Ok((track, pitch, yaw))
}

/// Writes `seed_heatmap.pgm`, `watershed.pgm`, `mask.pgm` and
/// `overlay.pgm` for one frame into `dir`.
pub fn dump_debug(image: &GrayImage, dir: &Path) -> Result<PupilTrack> {
    std::fs::create_dir_all(dir).map_err(|e| crate::error::Error::io(dir, e))?;
    let (rows, cols) = (image.rows(), image.cols());
    let sums = box_sums(image)?;
    let (lo, hi) = sums
        .iter()
        .fold((u32::MAX, 0), |(lo, hi), &s| (lo.min(s), hi.max(s)));
    let mut heat = GrayImage::new(rows, cols, 255);
    let inner = cols - 4;
    for (i, &s) in sums.iter().enumerate() {
        let v = if hi > lo { (255 * (s - lo) / (hi - lo)) as u8 } else { 0 };
        heat.set(i / inner + 2, i % inner + 2, v);
    }
    heat.write_pgm(&dir.join("seed_heatmap.pgm"))?;

    let seed = darkest_point(image)?;
    let labels = watershed(&gradient_magnitude(image), rows, cols, &pupil_markers(image, seed));
    let lab = GrayImage::from_vec(rows, cols, labels.iter().map(|&l| l * 120).collect())?;
    lab.write_pgm(&dir.join("watershed.pgm"))?;

    let track = track_pupil(image)?;
    let mask = GrayImage::from_vec(rows, cols, track.mask.mask.data.iter().map(|&m| if m { 255 } else { 0 }).collect())?;
    mask.write_pgm(&dir.join("mask.pgm"))?;

    let mut overlay = image.clone();
    let n = (8.0 * track.fit.semi_major).ceil().max(32.0) as usize;
    for i in 0..n {
        let p = track.fit.point_at(std::f64::consts::TAU * i as f64 / n as f64);
        let (r, c) = (p.y.round(), p.x.round());
        if r >= 0.0 && c >= 0.0 && (r as usize) < rows && (c as usize) < cols {
            overlay.set(r as usize, c as usize, 255);
        }
    }
    overlay.write_pgm(&dir.join("overlay.pgm"))?;
    Ok(track)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use std::f64::consts::FRAC_PI_2;

    #[test]
    fn labels_are_centre_and_major_length() {
        let fit = EllipseFit::new(Vector2::new(80.0, 60.0), 12.0, 7.0, 0.3).unwrap();
        let (c, size) = pupil_labels(&fit);
        assert_eq!(c, Vector2::new(80.0, 60.0));
        assert_eq!(size, 24.0);
    }

    #[test]
    fn circle_means_straight_gaze() {
        let fit = EllipseFit::new(Vector2::new(170.0, 100.0), 10.0, 10.0, 1.0).unwrap();
        let (p, y) = gaze_baseline(&fit, Vector2::new(160.0, 120.0));
        assert_abs_diff_eq!(p, 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(y, 0.0, epsilon = 1e-12);
    }

    #[test]
    fn half_ratio_tilts_sixty_degrees_toward_centre_offset() {
        // vertical major axis, so the minor axis (tilt) is horizontal
        let fit = EllipseFit::new(Vector2::new(200.0, 120.0), 10.0, 5.0, FRAC_PI_2).unwrap();
        let (p, y) = gaze_baseline(&fit, Vector2::new(160.0, 120.0));
        assert_abs_diff_eq!(p, 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(y, 60f64.to_radians(), epsilon = 1e-12);
        let left = EllipseFit { centre: Vector2::new(120.0, 120.0), ..fit };
        let (_, y) = gaze_baseline(&left, Vector2::new(160.0, 120.0));
        assert_abs_diff_eq!(y, -60f64.to_radians(), epsilon = 1e-12);
    }

    #[test]
    fn upward_displacement_gives_positive_pitch() {
        let fit = EllipseFit::new(Vector2::new(160.0, 90.0), 10.0, 5.0, 0.0).unwrap();
        let (p, y) = gaze_baseline(&fit, Vector2::new(160.0, 120.0));
        assert_abs_diff_eq!(p, 60f64.to_radians(), epsilon = 1e-12);
        assert_abs_diff_eq!(y, 0.0, epsilon = 1e-12);
    }
}
