use std::f64::consts::TAU;
use std::path::Path;

use nalgebra::{DVector, Vector2, Vector3};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::crop::{crop_face_region, random_crops, Raster, Window};
use super::hmd::{mask_hmd, mask_hmd_rgb, HmdProxy};
use super::render::render_buffers;
use crate::dataset::{
    DatasetKind, DatasetManifest, DatasetWriter, FaceLabel, FaceMeta, FaceSubject, SampleImage, Split,
    IMAGE_CONVENTION,
};
use crate::error::{Error, Result};
use crate::face_model::{FaceBasis, FaceParams, Pose};
use crate::image::{GrayImage, RgbImage};
use crate::seed;

/// Expression/pose trajectory and rendering settings for a face corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FaceDataConfig {
    pub subjects: usize,
    /// Base frames over all subjects; subjects receive contiguous blocks.
    pub frames: usize,
    pub crops_per_frame: usize,
    /// Held-out subject (leave-one-subject-out); `None` puts everyone in train.
    pub test_subject: Option<usize>,
    pub frame_rows: usize,
    pub frame_cols: usize,
    /// Pixels per object unit.
    pub scale: f64,
    pub identity_scale: f64,
    pub albedo_scale: f64,
    pub expression_scale: f64,
    /// Frames between expression keyframes.
    pub keyframe_interval: usize,
    pub max_yaw_deg: f64,
    pub max_pitch_deg: f64,
    pub max_roll_deg: f64,
    /// Uniform translation jitter, in pixels, on each axis.
    pub translation_jitter: f64,
    pub light_dir: [f64; 3],
    pub color: bool,
}

impl Default for FaceDataConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl FaceDataConfig {
    pub fn desk() -> Self {
        Self {
            subjects: 6,
            frames: 240,
            crops_per_frame: 10,
            test_subject: Some(5),
            frame_rows: 288,
            frame_cols: 352,
            scale: 100.0,
            identity_scale: 1.0,
            albedo_scale: 3.0,
            expression_scale: 1.5,
            keyframe_interval: 1,
            max_yaw_deg: 15.0,
            max_pitch_deg: 15.0,
            max_roll_deg: 3.0,
            translation_jitter: 6.0,
            light_dir: [0.25, -0.35, 1.0],
            color: false,
        }
    }

    pub fn paper() -> Self {
        Self {
            frames: 8608,
            ..Self::desk()
        }
    }

    pub fn planned_samples(&self) -> usize {
        self.frames * self.crops_per_frame
    }

    pub fn validate(&self) -> Result<()> {
        if self.subjects == 0 || self.frames < self.subjects || self.crops_per_frame == 0 {
            return Err(Error::InvalidInput(
                "need ≥ 1 subject, ≥ 1 frame per subject and ≥ 1 crop per frame".into(),
            ));
        }
        if self.test_subject.is_some_and(|t| t >= self.subjects) {
            return Err(Error::InvalidInput("test subject out of range".into()));
        }
        if self.keyframe_interval == 0 || !(self.scale > 0.0) {
            return Err(Error::InvalidInput("keyframe interval and scale must be positive".into()));
        }
        Ok(())
    }

    pub fn subject_of(&self, frame: usize) -> usize {
        frame * self.subjects / self.frames
    }

    fn subject_start(&self, subject: usize) -> usize {
        (subject * self.frames).div_ceil(self.subjects)
    }

    fn split_of(&self, subject: usize) -> Split {
        if self.test_subject == Some(subject) {
            Split::Test
        } else {
            Split::Train
        }
    }
}

fn gaussian_coeffs(rng: &mut impl Rng, sigma: &[f64], scale: f64) -> DVector<f64> {
    DVector::from_iterator(
        sigma.len(),
        sigma.iter().map(|s| scale * s * rng.sample::<f64, _>(StandardNormal)),
    )
}

/// Identity and albedo coefficients of a synthetic subject.
pub fn subject_params(basis: &FaceBasis, cfg: &FaceDataConfig, master_seed: u64, subject: usize) -> FaceParams {
    let mut rng = seed::rng(master_seed, &[seed::STREAM_SUBJECT, subject as u64]);
    FaceParams {
        x_id: gaussian_coeffs(&mut rng, &basis.sigma_id, cfg.identity_scale),
        x_exp: DVector::zeros(basis.dim_exp()),
        x_alb: gaussian_coeffs(&mut rng, &basis.sigma_alb, cfg.albedo_scale),
    }
}

/// Keyframed expression trajectory with smoothstep blending.
pub fn frame_expression(basis: &FaceBasis, cfg: &FaceDataConfig, master_seed: u64, frame: usize) -> DVector<f64> {
    let subject = cfg.subject_of(frame);
    let local = frame - cfg.subject_start(subject);
    let k = local / cfg.keyframe_interval;
    let frac = (local % cfg.keyframe_interval) as f64 / cfg.keyframe_interval as f64;
    let key = |j: usize| {
        let mut rng = seed::rng(master_seed, &[seed::STREAM_KEYFRAME, subject as u64, j as u64]);
        gaussian_coeffs(&mut rng, &basis.sigma_exp, cfg.expression_scale)
    };
    let w = frac * frac * (3.0 - 2.0 * frac);
    key(k) * (1.0 - w) + key(k + 1) * w
}

/// Sinusoidal head motion plus per-frame translation jitter.
pub fn frame_pose(cfg: &FaceDataConfig, master_seed: u64, frame: usize) -> Result<Pose> {
    let subject = cfg.subject_of(frame);
    let local = (frame - cfg.subject_start(subject)) as f64;
    let mut srng = seed::rng(master_seed, &[seed::STREAM_SUBJECT, subject as u64, 1]);
    let phases: [f64; 3] = [srng.random_range(0.0..TAU), srng.random_range(0.0..TAU), srng.random_range(0.0..TAU)];
    let yaw = cfg.max_yaw_deg.to_radians() * (TAU * local / 37.0 + phases[0]).sin();
    let pitch = cfg.max_pitch_deg.to_radians() * (TAU * local / 53.0 + phases[1]).sin();
    let roll = cfg.max_roll_deg.to_radians() * (TAU * local / 71.0 + phases[2]).sin();
    let mut frng = seed::rng(master_seed, &[seed::STREAM_FRAME, frame as u64]);
    let j = cfg.translation_jitter;
    let jitter = if j > 0.0 {
        Vector2::new(frng.random_range(-j..=j), frng.random_range(-j..=j))
    } else {
        Vector2::zeros()
    };
    let centre = Vector2::new(cfg.frame_cols as f64 / 2.0, cfg.frame_rows as f64 / 2.0);
    Pose::from_angles(yaw, pitch, roll, centre + jitter, cfg.scale)
}

/// One base frame's crops with their labels, before writing.
pub struct FaceFrame {
    pub frame: usize,
    pub subject: usize,
    pub pose: Pose,
    pub x_exp: DVector<f64>,
    pub crops: Vec<Window<SampleImage>>,
}

impl Raster for SampleImage {
    fn rows(&self) -> usize {
        SampleImage::rows(self)
    }
    fn cols(&self) -> usize {
        SampleImage::cols(self)
    }
    fn window(&self, top: usize, left: usize, rows: usize, cols: usize) -> Result<Self> {
        Ok(match self {
            SampleImage::Gray(g) => SampleImage::Gray(g.crop(top, left, rows, cols)?),
            SampleImage::Rgb(c) => SampleImage::Rgb(c.crop(top, left, rows, cols)?),
        })
    }
}

/// Renders the unmasked full frame for a stored label; used to regenerate
/// ground-truth imagery from a manifest.
pub fn render_unmasked(
    basis: &FaceBasis,
    params: &FaceParams,
    pose: &Pose,
    cfg: &FaceDataConfig,
) -> Result<SampleImage> {
    let light = Vector3::from(cfg.light_dir);
    let buf = render_buffers(basis, params, pose, cfg.frame_cols, cfg.frame_rows, light)?;
    Ok(if cfg.color {
        SampleImage::Rgb(buf.to_rgb())
    } else {
        SampleImage::Gray(buf.to_gray())
    })
}

/// Full per-frame pipeline: trajectory sample, render, headset mask, region
/// crop (centred on the neutral-expression landmarks, which is all a pose
/// tracker can know), random crops.
pub fn synthesize_frame(
    basis: &FaceBasis,
    hmd: &HmdProxy,
    cfg: &FaceDataConfig,
    master_seed: u64,
    frame: usize,
) -> Result<FaceFrame> {
    let subject = cfg.subject_of(frame);
    let identity = subject_params(basis, cfg, master_seed, subject);
    let x_exp = frame_expression(basis, cfg, master_seed, frame);
    let params = FaceParams {
        x_exp: x_exp.clone(),
        ..identity.clone()
    };
    let pose = frame_pose(cfg, master_seed, frame)?;
    let masked = match render_unmasked(basis, &params, &pose, cfg)? {
        SampleImage::Gray(g) => SampleImage::Gray(mask_hmd(&g, hmd, &pose)),
        SampleImage::Rgb(c) => SampleImage::Rgb(mask_hmd_rgb(&c, hmd, &pose)),
    };
    let region = crop_face_region(&masked, &pose, basis, &identity)?;
    let crop_seed = seed::derive(master_seed, &[seed::STREAM_CROP, frame as u64]);
    let crops = random_crops(&region.image, cfg.crops_per_frame, crop_seed)?
        .into_iter()
        .map(|w| Window {
            image: w.image,
            offset: (region.offset.0 + w.offset.0, region.offset.1 + w.offset.1),
        })
        .collect();
    Ok(FaceFrame {
        frame,
        subject,
        pose,
        x_exp,
        crops,
    })
}

const CHUNK_FRAMES: usize = 64;

/// Writes a face corpus to `out_dir`. Frames are synthesised in parallel in
/// fixed-size chunks and written in frame order, so the bytes on disk do not
/// depend on the thread count.
pub fn gen_face_dataset(
    basis: &FaceBasis,
    basis_path: &str,
    cfg: &FaceDataConfig,
    hmd: &HmdProxy,
    out_dir: &Path,
    master_seed: u64,
) -> Result<DatasetManifest> {
    cfg.validate()?;
    let mut writer = DatasetWriter::create(out_dir)?;
    for chunk_start in (0..cfg.frames).step_by(CHUNK_FRAMES) {
        let chunk_end = (chunk_start + CHUNK_FRAMES).min(cfg.frames);
        let frames: Vec<FaceFrame> = (chunk_start..chunk_end)
            .into_par_iter()
            .map(|f| synthesize_frame(basis, hmd, cfg, master_seed, f))
            .collect::<Result<_>>()?;
        for fr in frames {
            for w in &fr.crops {
                let label = FaceLabel {
                    id: writer.next_id(),
                    subject: fr.subject,
                    frame: fr.frame,
                    x_exp: fr.x_exp.iter().copied().collect(),
                    pose: fr.pose.to_array().to_vec(),
                    crop_offset: [w.offset.0, w.offset.1],
                };
                writer.push(&w.image, &label, fr.subject, fr.frame, cfg.split_of(fr.subject))?;
            }
        }
    }
    let subjects = (0..cfg.subjects)
        .map(|s| {
            let p = subject_params(basis, cfg, master_seed, s);
            FaceSubject {
                id: s,
                x_id: p.x_id.iter().copied().collect(),
                x_alb: p.x_alb.iter().copied().collect(),
                split: cfg.split_of(s),
            }
        })
        .collect();
    let manifest = DatasetManifest {
        kind: DatasetKind::Face,
        format_version: 1,
        seed: master_seed,
        image_convention: IMAGE_CONVENTION.into(),
        image_rows: super::crop::CROP_ROWS,
        image_cols: super::crop::CROP_COLS,
        color: cfg.color,
        labels: String::new(),
        sample_count: 0,
        samples: Vec::new(),
        face: Some(FaceMeta {
            basis: basis_path.into(),
            frame_rows: cfg.frame_rows,
            frame_cols: cfg.frame_cols,
            light_dir: cfg.light_dir,
            subjects,
        }),
        eye: None,
        config: serde_json::to_value(cfg).expect("config serialises"),
    };
    writer.finish(manifest)
}

/// Gray or colour image helpers used by tests and the CLI.
pub fn sample_as_gray(img: &SampleImage) -> GrayImage {
    match img {
        SampleImage::Gray(g) => g.clone(),
        SampleImage::Rgb(c) => RgbImage::to_gray(c),
    }
}
