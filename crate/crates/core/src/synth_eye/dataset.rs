use std::f64::consts::{PI, TAU};
use std::path::Path;

use nalgebra::Vector2;
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::render::{hex_ring, render_eye, EyeRenderSpec, RenderedEye, IRIS_COLOURS};
use super::{EyeState, MAX_GAZE_DEG};
use crate::dataset::{
    DatasetKind, DatasetManifest, DatasetWriter, EyeLabel, EyeMeta, SampleImage, Split, IMAGE_CONVENTION,
};
use crate::error::{Error, Result};
use crate::image::GrayImage;
use crate::pupil::{pupil_labels, track_pupil, wrap_pi, EllipseFit};
use crate::seed;
use crate::synth_face::{random_windows, Window};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LabelSource {
    /// Pupil size and centre from the classical tracker (render truth only
    /// when the tracker fails or disagrees grossly).
    Pipeline,
    Render,
}

/// Trajectory, appearance and augmentation settings for an eye corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EyeDataConfig {
    pub subjects: usize,
    /// Base frames over all subjects, in contiguous per-subject blocks.
    pub frames: usize,
    pub test_subject: Option<usize>,
    /// Frames given to the test subject; the rest are split evenly.
    pub test_frames: Option<usize>,
    pub crops_per_frame: usize,
    pub mirror: bool,
    pub frame_rows: usize,
    pub frame_cols: usize,
    pub downscale_rows: usize,
    pub downscale_cols: usize,
    pub crop_rows: usize,
    pub crop_cols: usize,
    pub circle_deg: f64,
    pub sweep_deg: f64,
    pub circle_frames: usize,
    pub sweep_frames: usize,
    pub jitter_deg: f64,
    pub noise: u8,
    pub label_source: LabelSource,
}

impl Default for EyeDataConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl EyeDataConfig {
    pub fn desk() -> Self {
        Self {
            subjects: 7,
            frames: 1000,
            test_subject: Some(6),
            test_frames: Some(250),
            crops_per_frame: 2,
            mirror: true,
            frame_rows: 240,
            frame_cols: 320,
            downscale_rows: 108,
            downscale_cols: 144,
            crop_rows: 87,
            crop_cols: 135,
            circle_deg: 25.0,
            sweep_deg: 35.0,
            circle_frames: 32,
            sweep_frames: 8,
            jitter_deg: 2.0,
            noise: 6,
            label_source: LabelSource::Pipeline,
        }
    }

    pub fn paper() -> Self {
        Self {
            frames: 18806,
            test_frames: None,
            crops_per_frame: 10,
            ..Self::desk()
        }
    }

    pub fn planned_samples(&self) -> usize {
        self.frames * self.crops_per_frame * if self.mirror { 2 } else { 1 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.subjects == 0 || self.crops_per_frame == 0 {
            return Err(Error::InvalidInput("need ≥ 1 subject and ≥ 1 crop per frame".into()));
        }
        if self.test_subject.is_some_and(|t| t >= self.subjects) {
            return Err(Error::InvalidInput("test subject out of range".into()));
        }
        if self.test_frames.is_some() && (self.test_subject.is_none() || self.subjects < 2) {
            return Err(Error::InvalidInput("test_frames needs a test subject and one other".into()));
        }
        let blocks = self.blocks();
        if blocks.iter().any(|&(_, n)| n == 0) {
            return Err(Error::InvalidInput("every subject needs at least one frame".into()));
        }
        if self.downscale_rows > self.frame_rows
            || self.downscale_cols > self.frame_cols
            || self.crop_rows > self.downscale_rows
            || self.crop_cols > self.downscale_cols
        {
            return Err(Error::InvalidInput("sizes must shrink from frame to downscale to crop".into()));
        }
        if self.circle_frames == 0 || self.sweep_frames == 0 {
            return Err(Error::InvalidInput("trajectory segment lengths must be positive".into()));
        }
        if self.circle_deg.max(self.sweep_deg) + self.jitter_deg > MAX_GAZE_DEG {
            return Err(Error::InvalidInput("trajectory exceeds the ±45° gaze range".into()));
        }
        Ok(())
    }

    /// `(first frame, frame count)` for each subject.
    pub fn blocks(&self) -> Vec<(usize, usize)> {
        let mut lens = vec![0; self.subjects];
        match (self.test_frames, self.test_subject) {
            (Some(tf), Some(ts)) => {
                let rest = self.frames.saturating_sub(tf);
                let others = self.subjects - 1;
                let mut k = 0;
                for (s, len) in lens.iter_mut().enumerate() {
                    if s == ts {
                        *len = tf.min(self.frames);
                    } else {
                        *len = (k + 1) * rest / others - k * rest / others;
                        k += 1;
                    }
                }
            }
            _ => {
                for (s, len) in lens.iter_mut().enumerate() {
                    *len = (s + 1) * self.frames / self.subjects - s * self.frames / self.subjects;
                }
            }
        }
        let mut start = 0;
        lens.into_iter()
            .map(|n| {
                let b = (start, n);
                start += n;
                b
            })
            .collect()
    }

    pub fn subject_of(&self, frame: usize) -> usize {
        self.blocks()
            .iter()
            .position(|&(s, n)| frame >= s && frame < s + n)
            .unwrap_or(self.subjects - 1)
    }

    pub fn split_of(&self, subject: usize) -> Split {
        if self.test_subject == Some(subject) {
            Split::Test
        } else {
            Split::Train
        }
    }

    pub fn scale(&self) -> (f64, f64) {
        (
            self.downscale_rows as f64 / self.frame_rows as f64,
            self.downscale_cols as f64 / self.frame_cols as f64,
        )
    }
}

/// Per-subject eye geometry and appearance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EyeSubject {
    pub id: usize,
    pub eyeball_offset: [f64; 2],
    pub eyeball_radius: f64,
    pub iris_color_index: usize,
    pub sclera: u8,
    pub pupil: u8,
    pub base_pupil_size: f64,
    pub phase: f64,
    /// Camera direction `(pitch, yaw)` from the eye, radians.
    pub camera_tilt: [f64; 2],
    pub split: Split,
}

impl EyeSubject {
    pub fn sample(cfg: &EyeDataConfig, master_seed: u64, id: usize) -> Self {
        let mut rng = seed::rng(master_seed, &[seed::STREAM_SUBJECT, id as u64]);
        Self {
            id,
            eyeball_offset: [rng.random_range(-6.0..=6.0), rng.random_range(-6.0..=6.0)],
            eyeball_radius: rng.random_range(90.0..=105.0),
            iris_color_index: rng.random_range(0..IRIS_COLOURS),
            sclera: rng.random_range(190..=215),
            pupil: rng.random_range(12..=30),
            base_pupil_size: rng.random_range(26.0..=40.0),
            phase: rng.random_range(0.0..TAU),
            camera_tilt: [
                -rng.random_range(12f64..=20.0).to_radians(),
                rng.random_range(-6f64..=6.0).to_radians(),
            ],
            split: cfg.split_of(id),
        }
    }

    pub fn render_spec(&self, cfg: &EyeDataConfig, noise_seed: u64) -> EyeRenderSpec {
        let centre = [(cfg.frame_cols as f64 - 1.0) / 2.0, (cfg.frame_rows as f64 - 1.0) / 2.0];
        EyeRenderSpec {
            rows: cfg.frame_rows,
            cols: cfg.frame_cols,
            iris_color_index: self.iris_color_index,
            glints: hex_ring(centre, 38.0),
            sclera: self.sclera,
            pupil: self.pupil,
            noise: cfg.noise,
            eyeball_centre: [centre[0] + self.eyeball_offset[0], centre[1] + self.eyeball_offset[1]],
            eyeball_radius: self.eyeball_radius,
            camera_tilt: self.camera_tilt,
            seed: noise_seed,
            ..EyeRenderSpec::default()
        }
    }
}

/// Gaze and pupil size at a frame: a circle of fixations followed by an
/// out-and-back sweep in each of eight directions, with the pupil
/// constricting as the target approaches.
fn trajectory(cfg: &EyeDataConfig, subject: &EyeSubject, local: usize, rng: &mut impl Rng) -> (f64, f64, f64) {
    let cycle = cfg.circle_frames + 8 * cfg.sweep_frames;
    let m = local % cycle;
    let (pitch, yaw, near) = if m < cfg.circle_frames {
        let phi = TAU * m as f64 / cfg.circle_frames as f64 + subject.phase;
        let a = cfg.circle_deg.to_radians();
        (a * phi.sin(), a * phi.cos(), 0.5)
    } else {
        let k = (m - cfg.circle_frames) / cfg.sweep_frames;
        let u = (((m - cfg.circle_frames) % cfg.sweep_frames) as f64 + 0.5) / cfg.sweep_frames as f64;
        let tri = 1.0 - (2.0 * u - 1.0).abs();
        let psi = k as f64 * PI / 4.0;
        let a = cfg.sweep_deg.to_radians() * tri;
        (a * psi.sin(), a * psi.cos(), tri)
    };
    let j = cfg.jitter_deg.to_radians();
    let (dp, dy) = if j > 0.0 {
        (rng.random_range(-j..=j), rng.random_range(-j..=j))
    } else {
        (0.0, 0.0)
    };
    let lim = MAX_GAZE_DEG.to_radians();
    let wobble: f64 = rng.sample::<f64, _>(StandardNormal).clamp(-2.0, 2.0);
    let size = (subject.base_pupil_size * (1.15 - 0.3 * near) * (1.0 + 0.06 * wobble)).clamp(16.0, 56.0);
    ((pitch + dp).clamp(-lim, lim), (yaw + dy).clamp(-lim, lim), size)
}

/// Renders the full-resolution frame `frame` of a corpus.
pub fn render_frame(cfg: &EyeDataConfig, master_seed: u64, frame: usize) -> Result<(EyeSubject, EyeState, RenderedEye)> {
    let s = cfg.subject_of(frame);
    let subject = EyeSubject::sample(cfg, master_seed, s);
    let local = frame - cfg.blocks()[s].0;
    let mut rng = seed::rng(master_seed, &[seed::STREAM_FRAME, frame as u64]);
    let (pitch, yaw, size) = trajectory(cfg, &subject, local, &mut rng);
    let spec = subject.render_spec(cfg, seed::derive(master_seed, &[seed::STREAM_NOISE, frame as u64]));
    let state = spec.state_for(pitch, yaw, size);
    let rendered = render_eye(&state, &spec)?;
    Ok((subject, state, rendered))
}

/// One base frame with its (optionally mirrored) crops and labels.
pub struct EyeFrame {
    pub frame: usize,
    pub subject: usize,
    pub samples: Vec<(EyeLabel, Window<GrayImage>)>,
}

fn mirror_label(label: &EyeLabel, cols: usize) -> EyeLabel {
    let w = cols as f64 - 1.0;
    EyeLabel {
        yaw: -label.yaw,
        centre: [w - label.centre[0], label.centre[1]],
        mirrored: !label.mirrored,
        gt_ellipse: crate::dataset::EllipseRecord {
            centre: [w - label.gt_ellipse.centre[0], label.gt_ellipse.centre[1]],
            orientation: wrap_pi(PI - label.gt_ellipse.orientation),
            ..label.gt_ellipse
        },
        ..label.clone()
    }
}

/// Tracker labels, falling back to render truth when the tracker fails or
/// is off by more than 3 px / 15 %.
fn pupil_label(cfg: &EyeDataConfig, image: &GrayImage, truth: &EllipseFit) -> (Vector2<f64>, f64, &'static str) {
    let (tc, ts) = pupil_labels(truth);
    if cfg.label_source == LabelSource::Pipeline {
        if let Ok(track) = track_pupil(image) {
            let (c, s) = pupil_labels(&track.fit);
            if (c - tc).norm() <= 3.0 && (s - ts).abs() <= 0.15 * ts {
                return (c, s, "pipeline");
            }
        }
    }
    (tc, ts, "render")
}

pub fn synthesize_eye_frame(cfg: &EyeDataConfig, master_seed: u64, frame: usize) -> Result<EyeFrame> {
    let (subject, state, rendered) = render_frame(cfg, master_seed, frame)?;
    let (centre, size, source) = pupil_label(cfg, &rendered.image, &rendered.ellipse);
    let base = EyeLabel {
        id: 0,
        subject: subject.id,
        frame,
        pitch: state.pitch,
        yaw: state.yaw,
        pupil_size: size,
        centre: [centre.x, centre.y],
        mirrored: false,
        crop_offset: [0, 0],
        gt_ellipse: rendered.ellipse.to_record(),
        label_source: source.into(),
    };
    let mut variants = vec![(base.clone(), rendered.image.clone())];
    if cfg.mirror {
        variants.push((mirror_label(&base, cfg.frame_cols), rendered.image.flip_horizontal()));
    }
    let mut samples = Vec::new();
    for (label, full) in variants {
        let down = full.downscale_area(cfg.downscale_rows, cfg.downscale_cols)?;
        let crop_seed = seed::derive(master_seed, &[seed::STREAM_CROP, frame as u64, u64::from(label.mirrored)]);
        for w in random_windows(&down, cfg.crop_rows, cfg.crop_cols, cfg.crops_per_frame, crop_seed)? {
            let l = EyeLabel {
                crop_offset: [w.offset.0, w.offset.1],
                ..label.clone()
            };
            samples.push((l, w));
        }
    }
    Ok(EyeFrame {
        frame,
        subject: subject.id,
        samples,
    })
}

/// Regression target `(pitch, yaw, size, centre x, centre y)` with the
/// centre measured from the crop's top-left corner in full-frame pixels.
pub fn eye_target(label: &EyeLabel, cfg_scale: (f64, f64)) -> [f64; 5] {
    let (sy, sx) = cfg_scale;
    [
        label.pitch,
        label.yaw,
        label.pupil_size,
        label.centre[0] - label.crop_offset[1] as f64 / sx,
        label.centre[1] - label.crop_offset[0] as f64 / sy,
    ]
}

/// Inverse of [`eye_target`] for a crop at `offset` (downscaled `(row, col)`).
pub fn state_from_target(t: [f64; 5], offset: (usize, usize), cfg_scale: (f64, f64)) -> EyeState {
    let (sy, sx) = cfg_scale;
    EyeState {
        pitch: t[0],
        yaw: t[1],
        pupil_size: t[2],
        pupil_centre: Vector2::new(t[3] + offset.1 as f64 / sx, t[4] + offset.0 as f64 / sy),
    }
}

const CHUNK_FRAMES: usize = 64;

/// Writes an eye corpus to `out_dir`; frames are synthesised in parallel
/// chunks and written in frame order.
pub fn gen_eye_dataset(cfg: &EyeDataConfig, out_dir: &Path, master_seed: u64) -> Result<DatasetManifest> {
    cfg.validate()?;
    let mut writer = DatasetWriter::create(out_dir)?;
    for chunk_start in (0..cfg.frames).step_by(CHUNK_FRAMES) {
        let chunk_end = (chunk_start + CHUNK_FRAMES).min(cfg.frames);
        let frames: Vec<EyeFrame> = (chunk_start..chunk_end)
            .into_par_iter()
            .map(|f| synthesize_eye_frame(cfg, master_seed, f))
            .collect::<Result<_>>()?;
        for fr in frames {
            for (mut label, w) in fr.samples {
                label.id = writer.next_id();
                writer.push(&SampleImage::Gray(w.image), &label, fr.subject, fr.frame, cfg.split_of(fr.subject))?;
            }
        }
    }
    let subjects = (0..cfg.subjects)
        .map(|s| serde_json::to_value(EyeSubject::sample(cfg, master_seed, s)).expect("subject serialises"))
        .collect();
    let manifest = DatasetManifest {
        kind: DatasetKind::Eye,
        format_version: 1,
        seed: master_seed,
        image_convention: IMAGE_CONVENTION.into(),
        image_rows: cfg.crop_rows,
        image_cols: cfg.crop_cols,
        color: false,
        labels: String::new(),
        sample_count: 0,
        samples: Vec::new(),
        face: None,
        eye: Some(EyeMeta {
            frame_rows: cfg.frame_rows,
            frame_cols: cfg.frame_cols,
            downscale_rows: cfg.downscale_rows,
            downscale_cols: cfg.downscale_cols,
            subjects,
        }),
        config: serde_json::to_value(cfg).expect("config serialises"),
    };
    writer.finish(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sample_count_arithmetic() {
        let cfg = EyeDataConfig {
            frames: 100,
            crops_per_frame: 10,
            ..EyeDataConfig::desk()
        };
        assert_eq!(cfg.planned_samples(), 2000);
        assert_eq!(EyeDataConfig::paper().planned_samples(), 376_120);
    }

    #[test]
    fn blocks_cover_all_frames() {
        let cfg = EyeDataConfig {
            frames: 1100,
            test_frames: Some(500),
            ..EyeDataConfig::desk()
        };
        let b = cfg.blocks();
        assert_eq!(b.iter().map(|x| x.1).sum::<usize>(), 1100);
        assert_eq!(b[6].1, 500);
        assert_eq!(cfg.subject_of(599), 5);
        assert_eq!(cfg.subject_of(600), 6);
    }

    #[test]
    fn mirror_negates_yaw_and_reflects_centre() {
        let cfg = EyeDataConfig {
            frames: 7,
            crops_per_frame: 1,
            ..EyeDataConfig::desk()
        };
        let fr = synthesize_eye_frame(&cfg, 11, 3).unwrap();
        let (a, b) = (&fr.samples[0].0, &fr.samples[1].0);
        assert!(!a.mirrored && b.mirrored);
        assert_eq!(b.yaw, -a.yaw);
        assert_eq!(b.pitch, a.pitch);
        assert_eq!(b.centre[0], 319.0 - a.centre[0]);
        let back = mirror_label(b, 320);
        assert_eq!(back.yaw, a.yaw);
        assert_eq!(back.centre, a.centre);
        assert!((back.gt_ellipse.orientation - a.gt_ellipse.orientation).abs() < 1e-12);
    }

    #[test]
    fn target_round_trip() {
        let cfg = EyeDataConfig::desk();
        let fr = synthesize_eye_frame(&cfg, 5, 0).unwrap();
        let (label, w) = &fr.samples[0];
        let t = eye_target(label, cfg.scale());
        let st = state_from_target(t, w.offset, cfg.scale());
        assert!((st.pupil_centre.x - label.centre[0]).abs() < 1e-9);
        assert!((st.pupil_centre.y - label.centre[1]).abs() < 1e-9);
    }
}
