use std::path::Path;

use nalgebra::Vector2;
use serde::{Deserialize, Serialize};

use super::{
    benchmark, face_ground_truth, mean_gaze_error, mean_landmark_error, process_frame, AvatarState, CaptureRig,
    EyeInputGeometry, TimingStats,
};
use crate::dataset::{read_labels, read_sample_image, DatasetKind, DatasetManifest, FaceLabel, SampleImage, Split};
use crate::error::{Error, Result};
use crate::face_model::{FaceBasis, Pose};
use crate::image::GrayImage;
use crate::nets::{face_label_state, predict_batch, Model, Network};
use crate::pupil::baseline_eye;
use crate::synth_eye::{render_frame, EyeDataConfig, EyeState};
use crate::synth_face::{mask_hmd, mask_hmd_rgb, render_unmasked, FaceDataConfig, HmdProxy};

fn config_of<T: serde::de::DeserializeOwned>(manifest: &DatasetManifest) -> Result<T> {
    serde_json::from_value(manifest.config.clone())
        .map_err(|e| Error::format("manifest", format!("generation config does not parse: {e}")))
}

/// Generation config stored in a face manifest.
pub fn face_config(manifest: &DatasetManifest) -> Result<FaceDataConfig> {
    expect_kind(manifest, DatasetKind::Face)?;
    config_of(manifest)
}

/// Generation config stored in an eye manifest.
pub fn eye_config(manifest: &DatasetManifest) -> Result<EyeDataConfig> {
    expect_kind(manifest, DatasetKind::Eye)?;
    config_of(manifest)
}

fn expect_kind(manifest: &DatasetManifest, kind: DatasetKind) -> Result<()> {
    if manifest.kind != kind {
        return Err(Error::format("manifest", format!("expected a {kind:?} dataset, found {:?}", manifest.kind)));
    }
    Ok(())
}

/// Re-renders the headset-masked full frame behind a face label.
pub fn render_face_frame(manifest: &DatasetManifest, basis: &FaceBasis, label: &FaceLabel) -> Result<SampleImage> {
    let cfg = face_config(manifest)?;
    let (params, pose) = face_label_state(manifest, basis, label)?;
    let hmd = HmdProxy::default();
    Ok(match render_unmasked(basis, &params, &pose, &cfg)? {
        SampleImage::Gray(g) => SampleImage::Gray(mask_hmd(&g, &hmd, &pose)),
        SampleImage::Rgb(c) => SampleImage::Rgb(mask_hmd_rgb(&c, &hmd, &pose)),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FaceEvalReport {
    pub samples: usize,
    pub mean_landmark_error_px: f64,
    /// Error of always predicting the neutral expression.
    pub neutral_landmark_error_px: f64,
}

/// Lower-face landmark error of `net` on the stored crops of `split`.
pub fn eval_face(
    dir: &Path,
    manifest: &DatasetManifest,
    basis: &FaceBasis,
    net: &Network,
    split: Split,
) -> Result<FaceEvalReport> {
    let wanted = manifest.split_indices(split);
    if wanted.is_empty() {
        return Err(Error::InvalidInput(format!("no {split:?} samples in the face dataset")));
    }
    let truth_all = face_ground_truth(dir, manifest, basis)?;
    let truth: Vec<AvatarState> = wanted.iter().map(|&i| truth_all[i].clone()).collect();
    let images: Vec<Vec<u8>> = wanted
        .iter()
        .map(|&i| Ok(crate::nets::image_pixels(&read_sample_image(dir, &manifest.samples[i])?)))
        .collect::<Result<_>>()?;
    let refs: Vec<&[u8]> = images.iter().map(Vec::as_slice).collect();
    let outputs = predict_batch(net, &refs)?;
    let predicted: Vec<AvatarState> = truth
        .iter()
        .zip(outputs)
        .map(|(t, x_exp)| AvatarState { x_exp, ..t.clone() })
        .collect();
    let neutral: Vec<AvatarState> = truth
        .iter()
        .map(|t| AvatarState {
            x_exp: vec![0.0; basis.dim_exp()],
            ..t.clone()
        })
        .collect();
    Ok(FaceEvalReport {
        samples: truth.len(),
        mean_landmark_error_px: mean_landmark_error(&predicted, &truth, basis)?,
        neutral_landmark_error_px: mean_landmark_error(&neutral, &truth, basis)?,
    })
}

/// A full-resolution eye frame with its render ground truth.
#[derive(Debug, Clone)]
pub struct EyeFrameSample {
    pub frame: usize,
    pub mirrored: bool,
    pub image: GrayImage,
    pub truth: EyeState,
}

/// Full-resolution frames of the held-out eye subject (each frame and, when
/// the corpus mirrors, its mirror image), regenerated from the manifest.
pub fn held_out_eye_frames(manifest: &DatasetManifest, limit: Option<usize>) -> Result<Vec<EyeFrameSample>> {
    let cfg = eye_config(manifest)?;
    let mut out = Vec::new();
    for frame in 0..cfg.frames {
        if cfg.split_of(cfg.subject_of(frame)) != Split::Test {
            continue;
        }
        if limit.is_some_and(|n| out.len() >= n) {
            break;
        }
        let (_, state, rendered) = render_frame(&cfg, manifest.seed, frame)?;
        let mirrored = cfg.mirror.then(|| {
            let w = cfg.frame_cols as f64 - 1.0;
            EyeFrameSample {
                frame,
                mirrored: true,
                image: rendered.image.flip_horizontal(),
                truth: EyeState {
                    yaw: -state.yaw,
                    pupil_centre: Vector2::new(w - state.pupil_centre.x, state.pupil_centre.y),
                    ..state
                },
            }
        });
        out.push(EyeFrameSample {
            frame,
            mirrored: false,
            image: rendered.image,
            truth: state,
        });
        out.extend(mirrored);
    }
    if let Some(n) = limit {
        out.truncate(n);
    }
    if out.is_empty() {
        return Err(Error::InvalidInput("eye dataset has no held-out frames".into()));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EyeEvalReport {
    pub frames: usize,
    pub net_gaze_error_deg: f64,
    /// Mean over the frames where the pupil tracker succeeded.
    pub baseline_gaze_error_deg: f64,
    pub baseline_failures: usize,
    /// Per frame: downscale, crop and forward pass.
    pub net_timing: TimingStats,
    /// Per frame: segmentation, ellipse fit and gaze solve.
    pub baseline_timing: TimingStats,
}

/// Gaze accuracy and per-frame latency of the eye network against the
/// ellipse-ratio baseline, on identical frames.
pub fn eval_eye(model: &Model, geometry: EyeInputGeometry, frames: &[EyeFrameSample]) -> Result<EyeEvalReport> {
    let n = frames.len();
    let mut net_pred = vec![EyeState::from_array([0.0; 5]); n];
    let net_timing = benchmark(n, |i| {
        let (crop, off) = geometry.prepare(&frames[i].image)?;
        let out = predict_batch(&model.net, &[crop.data()])?.remove(0);
        net_pred[i] = crate::nets::eye_state(model, &out, off);
        Ok(())
    })?;
    let mut base_pred: Vec<Option<EyeState>> = vec![None; n];
    let baseline_timing = benchmark(n, |i| {
        base_pred[i] = baseline_eye(&frames[i].image).ok().map(|(track, pitch, yaw)| EyeState {
            pitch,
            yaw,
            pupil_size: track.fit.semi_major * 2.0,
            pupil_centre: track.fit.centre,
        });
        Ok(())
    })?;
    let truth: Vec<EyeState> = frames.iter().map(|f| f.truth).collect();
    let (ok_pred, ok_truth): (Vec<EyeState>, Vec<EyeState>) = base_pred
        .iter()
        .zip(&truth)
        .filter_map(|(p, t)| p.map(|p| (p, *t)))
        .unzip();
    let baseline_failures = n - ok_pred.len();
    Ok(EyeEvalReport {
        frames: n,
        net_gaze_error_deg: mean_gaze_error(&net_pred, &truth)?,
        baseline_gaze_error_deg: if ok_pred.is_empty() {
            f64::NAN
        } else {
            mean_gaze_error(&ok_pred, &ok_truth)?
        },
        baseline_failures,
        net_timing,
        baseline_timing,
    })
}

/// One preloaded capture frame for benchmarking.
pub struct BenchFrame {
    pub frame: usize,
    pub face: SampleImage,
    pub eyes: [GrayImage; 2],
    pub pose: Pose,
}

/// Per-stage and end-to-end timings over preloaded frames.
pub fn bench_pipeline(rig: &CaptureRig<'_>, eye_model: &Model, frames: &[BenchFrame]) -> Result<super::BenchReport> {
    let n = frames.len();
    let face_net = benchmark(n, |i| {
        let f = &frames[i];
        let crop = super::face_input(&f.face, &f.pose, rig.basis, rig.identity)?;
        rig.face.predict_expression(&crop, f.frame).map(drop)
    })?;
    let eye_net = benchmark(n, |i| {
        let (crop, _) = rig.eye_geometry.prepare(&frames[i].eyes[0])?;
        predict_batch(&eye_model.net, &[crop.data()]).map(drop)
    })?;
    let pupil_baseline = benchmark(n, |i| {
        let _ = baseline_eye(&frames[i].eyes[0]);
        Ok(())
    })?;
    let end_to_end = benchmark(n, |i| {
        let f = &frames[i];
        process_frame(rig, f.frame, &f.face, [&f.eyes[0], &f.eyes[1]], Some(&f.pose)).map(drop)
    })?;
    Ok(super::BenchReport {
        face_net,
        eye_net,
        pupil_baseline,
        end_to_end,
    })
}

/// Face labels of `split`, in manifest order.
pub fn face_labels(dir: &Path, manifest: &DatasetManifest, split: Split) -> Result<Vec<FaceLabel>> {
    let labels: Vec<FaceLabel> = read_labels(dir, manifest)?;
    Ok(manifest.split_indices(split).into_iter().map(|i| labels[i].clone()).collect())
}
