use nalgebra::Vector2;
use rand::Rng;

use crate::error::{Error, Result};
use crate::face_model::{landmarks_2d, FaceBasis, FaceParams, LandmarkSet, Pose};
use crate::image::{GrayImage, RgbImage};
use crate::seed;

pub const REGION_ROWS: usize = 120;
pub const REGION_COLS: usize = 230;
pub const CROP_ROWS: usize = 112;
pub const CROP_COLS: usize = 224;
pub const DEFAULT_CROP_COUNT: usize = 10;

/// Rasters that can be windowed.
pub trait Raster: Sized + Clone {
    fn rows(&self) -> usize;
    fn cols(&self) -> usize;
    fn window(&self, top: usize, left: usize, rows: usize, cols: usize) -> Result<Self>;
}

impl Raster for GrayImage {
    fn rows(&self) -> usize {
        GrayImage::rows(self)
    }
    fn cols(&self) -> usize {
        GrayImage::cols(self)
    }
    fn window(&self, top: usize, left: usize, rows: usize, cols: usize) -> Result<Self> {
        self.crop(top, left, rows, cols)
    }
}

impl Raster for RgbImage {
    fn rows(&self) -> usize {
        RgbImage::rows(self)
    }
    fn cols(&self) -> usize {
        RgbImage::cols(self)
    }
    fn window(&self, top: usize, left: usize, rows: usize, cols: usize) -> Result<Self> {
        self.crop(top, left, rows, cols)
    }
}

/// A window cut from a larger raster; `offset` is `(row, col)` of its
/// top-left pixel in the source.
#[derive(Debug, Clone, PartialEq)]
pub struct Window<T> {
    pub image: T,
    pub offset: (usize, usize),
}

/// Centroid of the projected lower-face landmarks; fails if any landmark
/// projects outside the image.
pub fn lower_face_centroid(
    rows: usize,
    cols: usize,
    pose: &Pose,
    basis: &FaceBasis,
    params: &FaceParams,
) -> Result<Vector2<f64>> {
    let pts = landmarks_2d(basis, params, pose, LandmarkSet::Lower)?;
    if pts.is_empty() {
        return Err(Error::InvalidInput("basis has no lower-face landmarks".into()));
    }
    let max_x = cols as f64 - 1.0;
    let max_y = rows as f64 - 1.0;
    if let Some(p) = pts.iter().find(|p| !(p.x >= 0.0 && p.y >= 0.0 && p.x <= max_x && p.y <= max_y)) {
        return Err(Error::InvalidInput(format!(
            "landmark at ({:.1}, {:.1}) projects outside the {rows}x{cols} image",
            p.x, p.y
        )));
    }
    Ok(pts.iter().sum::<Vector2<f64>>() / pts.len() as f64)
}

/// 120-row × 230-column window centred on the projected lower-landmark
/// centroid, clamped to the image.
pub fn crop_face_region<T: Raster>(
    image: &T,
    pose: &Pose,
    basis: &FaceBasis,
    params: &FaceParams,
) -> Result<Window<T>> {
    if image.rows() < REGION_ROWS || image.cols() < REGION_COLS {
        return Err(Error::InvalidInput(format!(
            "image {}x{} smaller than the {REGION_ROWS}x{REGION_COLS} face region",
            image.rows(),
            image.cols()
        )));
    }
    let c = lower_face_centroid(image.rows(), image.cols(), pose, basis, params)?;
    let top = region_start(c.y, REGION_ROWS, image.rows());
    let left = region_start(c.x, REGION_COLS, image.cols());
    Ok(Window {
        image: image.window(top, left, REGION_ROWS, REGION_COLS)?,
        offset: (top, left),
    })
}

fn region_start(centre: f64, size: usize, limit: usize) -> usize {
    let start = (centre - (size as f64 - 1.0) / 2.0).round();
    start.clamp(0.0, (limit - size) as f64) as usize
}

/// `count` random 112×224 windows of a region, deterministic in `seed`;
/// offsets are uniform over every valid position.
pub fn random_crops<T: Raster>(region: &T, count: usize, seed: u64) -> Result<Vec<Window<T>>> {
    if count == 0 {
        return Err(Error::InvalidInput("crop count must be ≥ 1".into()));
    }
    random_windows(region, CROP_ROWS, CROP_COLS, count, seed)
}

pub(crate) fn random_windows<T: Raster>(
    region: &T,
    rows: usize,
    cols: usize,
    count: usize,
    seed_value: u64,
) -> Result<Vec<Window<T>>> {
    if region.rows() < rows || region.cols() < cols {
        return Err(Error::InvalidInput(format!(
            "region {}x{} smaller than crop {rows}x{cols}",
            region.rows(),
            region.cols()
        )));
    }
    let mut rng = seed::rng(seed_value, &[seed::STREAM_CROP]);
    let (slack_r, slack_c) = (region.rows() - rows, region.cols() - cols);
    (0..count)
        .map(|_| {
            let top = rng.random_range(0..=slack_r);
            let left = rng.random_range(0..=slack_c);
            Ok(Window {
                image: region.window(top, left, rows, cols)?,
                offset: (top, left),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn crops_are_deterministic_and_bounded() {
        let region = GrayImage::from_vec(
            REGION_ROWS,
            REGION_COLS,
            (0..REGION_ROWS * REGION_COLS).map(|i| (i % 251) as u8).collect(),
        )
        .unwrap();
        let a = random_crops(&region, 10, 42).unwrap();
        let b = random_crops(&region, 10, 42).unwrap();
        assert_eq!(a.len(), 10);
        assert_eq!(a, b);
        for w in &a {
            assert!(w.offset.0 <= 8 && w.offset.1 <= 6);
            assert_eq!((w.image.rows(), w.image.cols()), (CROP_ROWS, CROP_COLS));
            assert_eq!(w.image.get(0, 0), region.get(w.offset.0, w.offset.1));
        }
    }

    #[test]
    fn offsets_cover_all_positions() {
        let region = GrayImage::new(REGION_ROWS, REGION_COLS, 0);
        let crops = random_crops(&region, 2000, 1).unwrap();
        let mut seen = std::collections::HashSet::new();
        for w in crops {
            seen.insert(w.offset);
        }
        assert_eq!(seen.len(), 9 * 7);
    }

    #[test]
    fn zero_count_rejected() {
        let region = GrayImage::new(REGION_ROWS, REGION_COLS, 0);
        assert!(random_crops(&region, 0, 1).is_err());
    }

    #[test]
    fn region_start_clamps() {
        assert_eq!(region_start(10.0, 120, 288), 0);
        assert_eq!(region_start(287.0, 120, 288), 168);
        assert_eq!(region_start(144.0, 120, 288), (144.0f64 - 59.5).round() as usize);
    }
}
