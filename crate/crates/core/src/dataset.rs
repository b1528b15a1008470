//! On-disk dataset layout shared by the face and eye generators:
//! `manifest.json`, `images/NNNNNN.pgm` (`.png` for colour) and
//! `labels.jsonl` with one record per sample, in sample order.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{GrayImage, RgbImage};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const LABELS_FILE: &str = "labels.jsonl";
pub const IMAGES_DIR: &str = "images";
pub const IMAGE_CONVENTION: &str = "row-major, origin top-left, sizes are rows x columns, 8-bit";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetKind {
    Face,
    Eye,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub id: usize,
    pub image: String,
    pub subject: usize,
    pub frame: usize,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FaceSubject {
    pub id: usize,
    pub x_id: Vec<f64>,
    pub x_alb: Vec<f64>,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FaceMeta {
    pub basis: String,
    pub frame_rows: usize,
    pub frame_cols: usize,
    pub light_dir: [f64; 3],
    pub subjects: Vec<FaceSubject>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EyeMeta {
    pub frame_rows: usize,
    pub frame_cols: usize,
    pub downscale_rows: usize,
    pub downscale_cols: usize,
    pub subjects: Vec<serde_json::Value>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub kind: DatasetKind,
    pub format_version: u32,
    pub seed: u64,
    pub image_convention: String,
    pub image_rows: usize,
    pub image_cols: usize,
    pub color: bool,
    pub labels: String,
    pub sample_count: usize,
    pub samples: Vec<SampleRecord>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub face: Option<FaceMeta>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub eye: Option<EyeMeta>,
    pub config: serde_json::Value,
}

/// Label record of one face sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FaceLabel {
    pub id: usize,
    pub subject: usize,
    pub frame: usize,
    pub x_exp: Vec<f64>,
    /// Full-frame pose: row-major rotation (9), translation (2), scale (1).
    pub pose: Vec<f64>,
    /// `(row, col)` of the crop's top-left pixel in the rendered frame.
    pub crop_offset: [usize; 2],
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EllipseRecord {
    pub centre: [f64; 2],
    pub semi_major: f64,
    pub semi_minor: f64,
    pub orientation: f64,
}

/// Label record of one eye sample. Pixel quantities refer to the full-size
/// IR frame; `crop_offset` is in downscaled pixels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EyeLabel {
    pub id: usize,
    pub subject: usize,
    pub frame: usize,
    pub pitch: f64,
    pub yaw: f64,
    pub pupil_size: f64,
    pub centre: [f64; 2],
    pub mirrored: bool,
    pub crop_offset: [usize; 2],
    pub gt_ellipse: EllipseRecord,
    /// `"pipeline"` when size/centre came from the pupil pipeline,
    /// `"render"` when the pipeline failed and render ground truth was used.
    pub label_source: String,
}

impl DatasetManifest {
    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let m: Self = serde_json::from_str(&text).map_err(|e| Error::json(&path, e))?;
        if m.samples.len() != m.sample_count {
            return Err(Error::format(
                "manifest",
                format!("sample_count {} but {} records", m.sample_count, m.samples.len()),
            ));
        }
        Ok(m)
    }

    pub fn split_indices(&self, split: Split) -> Vec<usize> {
        self.samples
            .iter()
            .enumerate()
            .filter(|(_, s)| s.split == split)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn face_meta(&self) -> Result<&FaceMeta> {
        self.face
            .as_ref()
            .ok_or_else(|| Error::format("manifest", "not a face dataset"))
    }

    pub fn face_subject(&self, id: usize) -> Result<&FaceSubject> {
        self.face_meta()?
            .subjects
            .iter()
            .find(|s| s.id == id)
            .ok_or_else(|| Error::format("manifest", format!("unknown subject {id}")))
    }
}

pub fn read_labels<T: DeserializeOwned>(dir: &Path, manifest: &DatasetManifest) -> Result<Vec<T>> {
    let path = dir.join(&manifest.labels);
    let file = fs::File::open(&path).map_err(|e| Error::io(&path, e))?;
    let mut out = Vec::with_capacity(manifest.sample_count);
    for line in BufReader::new(file).lines() {
        let line = line.map_err(|e| Error::io(&path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::json(&path, e))?);
    }
    if out.len() != manifest.sample_count {
        return Err(Error::format(
            "labels",
            format!("expected {} records, found {}", manifest.sample_count, out.len()),
        ));
    }
    Ok(out)
}

/// Image of one sample, decoded.
#[derive(Debug, Clone, PartialEq)]
pub enum SampleImage {
    Gray(GrayImage),
    Rgb(RgbImage),
}

impl SampleImage {
    pub fn rows(&self) -> usize {
        match self {
            SampleImage::Gray(g) => g.rows(),
            SampleImage::Rgb(c) => c.rows(),
        }
    }

    pub fn cols(&self) -> usize {
        match self {
            SampleImage::Gray(g) => g.cols(),
            SampleImage::Rgb(c) => c.cols(),
        }
    }

    pub fn channels(&self) -> usize {
        match self {
            SampleImage::Gray(_) => 1,
            SampleImage::Rgb(_) => 3,
        }
    }

    /// Planar channel-major pixels scaled to `[0, 1]`.
    pub fn to_planar_unit(&self) -> Vec<f64> {
        match self {
            SampleImage::Gray(g) => g.to_unit(),
            SampleImage::Rgb(c) => {
                let n = c.rows() * c.cols();
                let mut out = vec![0.0; 3 * n];
                for (i, px) in c.data().chunks_exact(3).enumerate() {
                    for ch in 0..3 {
                        out[ch * n + i] = f64::from(px[ch]) / 255.0;
                    }
                }
                out
            }
        }
    }
}

pub fn read_sample_image(dir: &Path, record: &SampleRecord) -> Result<SampleImage> {
    let path = dir.join(&record.image);
    if record.image.ends_with(".png") {
        let img = image::open(&path)
            .map_err(|e| Error::format("png", format!("{}: {e}", path.display())))?
            .to_rgb8();
        let (w, h) = img.dimensions();
        let mut out = RgbImage::new(h as usize, w as usize, [0; 3]);
        for (x, y, p) in img.enumerate_pixels() {
            out.set(y as usize, x as usize, p.0);
        }
        Ok(SampleImage::Rgb(out))
    } else {
        GrayImage::read_pgm(&path).map(SampleImage::Gray)
    }
}

/// Streams samples to a dataset directory in id order.
pub struct DatasetWriter {
    dir: PathBuf,
    labels: BufWriter<fs::File>,
    samples: Vec<SampleRecord>,
}

impl DatasetWriter {
    pub fn create(dir: &Path) -> Result<Self> {
        let images = dir.join(IMAGES_DIR);
        fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;
        let path = dir.join(LABELS_FILE);
        let file = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
        Ok(Self {
            dir: dir.to_path_buf(),
            labels: BufWriter::new(file),
            samples: Vec::new(),
        })
    }

    pub fn next_id(&self) -> usize {
        self.samples.len()
    }

    pub fn push<L: Serialize>(
        &mut self,
        image: &SampleImage,
        label: &L,
        subject: usize,
        frame: usize,
        split: Split,
    ) -> Result<usize> {
        let id = self.samples.len();
        let ext = match image {
            SampleImage::Gray(_) => "pgm",
            SampleImage::Rgb(_) => "png",
        };
        let rel = format!("{IMAGES_DIR}/{id:06}.{ext}");
        let path = self.dir.join(&rel);
        match image {
            SampleImage::Gray(g) => g.write_pgm(&path)?,
            SampleImage::Rgb(c) => c.write_png(&path)?,
        }
        let line = serde_json::to_string(label).map_err(|e| Error::json(&path, e))?;
        let lpath = self.dir.join(LABELS_FILE);
        writeln!(self.labels, "{line}").map_err(|e| Error::io(&lpath, e))?;
        self.samples.push(SampleRecord {
            id,
            image: rel,
            subject,
            frame,
            split,
        });
        Ok(id)
    }

    /// Flushes labels, checks every referenced file exists and writes the manifest.
    pub fn finish(mut self, mut manifest: DatasetManifest) -> Result<DatasetManifest> {
        let lpath = self.dir.join(LABELS_FILE);
        self.labels.flush().map_err(|e| Error::io(&lpath, e))?;
        for s in &self.samples {
            let p = self.dir.join(&s.image);
            if !p.is_file() {
                return Err(Error::io(&p, std::io::Error::from(std::io::ErrorKind::NotFound)));
            }
        }
        manifest.labels = LABELS_FILE.into();
        manifest.sample_count = self.samples.len();
        manifest.samples = self.samples;
        let path = self.dir.join(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::json(&path, e))?;
        fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        Ok(manifest)
    }
}
