//! `FEN1` weight files.
//!
//! Layout (little-endian): magic `FEN1`; `u32` layer count; one `u64`
//! parameter count per layer; then every parameter as `f64`, layer by layer.
//! The [`ModelMeta`] sidecar at `<path>.json` carries the network spec and
//! any target normalisation.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::sync::Arc;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::layers::{Network, NetworkSpec};
use super::loss::{facial_kernel, loss_visibility, LossWeights};
use super::train::{predict_batch, TrainConfig, TrainSample};
use crate::dataset::{read_labels, read_sample_image, DatasetKind, DatasetManifest, EyeLabel, FaceLabel, SampleImage, Split};
use crate::error::{check_len, Error, Result};
use crate::face_model::{sidecar_path, FaceBasis, FaceParams, Mesh, Pose};
use crate::image::GrayImage;
use crate::synth_eye::{eye_target, state_from_target, EyeState};

const MAGIC: &[u8; 4] = b"FEN1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Facial,
    Eye,
}

/// Per-output affine standardisation `z = (y − mean) / std`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetNorm {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl TargetNorm {
    pub fn fit(targets: &[Vec<f64>]) -> Result<Self> {
        let Some(first) = targets.first() else {
            return Err(Error::InvalidInput("no targets to standardise".into()));
        };
        let d = first.len();
        let n = targets.len() as f64;
        let mut mean = vec![0.0; d];
        for t in targets {
            check_len("target", d, t.len())?;
            mean.iter_mut().zip(t).for_each(|(m, v)| *m += v / n);
        }
        let mut var = vec![0.0; d];
        for t in targets {
            var.iter_mut().zip(t.iter().zip(&mean)).for_each(|(s, (v, m))| *s += (v - m).powi(2) / n);
        }
        let std = var.into_iter().map(|v| v.sqrt().max(1e-9)).collect();
        Ok(Self { mean, std })
    }

    pub fn normalise(&self, y: &[f64]) -> Vec<f64> {
        y.iter().zip(self.mean.iter().zip(&self.std)).map(|(v, (m, s))| (v - m) / s).collect()
    }

    pub fn denormalise(&self, z: &[f64]) -> Vec<f64> {
        z.iter().zip(self.mean.iter().zip(&self.std)).map(|(v, (m, s))| v * s + m).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelMeta {
    pub format: String,
    pub kind: ModelKind,
    pub spec: NetworkSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target_norm: Option<TargetNorm>,
    /// Eye models: `(rows, cols)` factor from full frame to network frame.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub frame_scale: Option<[f64; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train_config: Option<TrainConfig>,
}

/// A network with the metadata needed to turn its outputs into labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub net: Network,
    pub meta: ModelMeta,
}

impl Model {
    pub fn new(net: Network, kind: ModelKind) -> Self {
        let spec = net.spec().clone();
        Self {
            net,
            meta: ModelMeta {
                format: "FEN1".into(),
                kind,
                spec,
                target_norm: None,
                frame_scale: None,
                train_config: None,
            },
        }
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let spec = self.net.spec();
        let counts = spec.param_counts()?;
        let mut buf = Vec::with_capacity(8 + 8 * counts.len() + 8 * self.net.n_params());
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&(spec.layers.len() as u32).to_le_bytes());
        for c in &counts {
            buf.extend_from_slice(&(*c as u64).to_le_bytes());
        }
        for v in self.net.params() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        fs::write(path, buf).map_err(|e| Error::io(path, e))?;
        let side = sidecar_path(path);
        let meta = ModelMeta {
            spec: spec.clone(),
            ..self.meta.clone()
        };
        let text = serde_json::to_string_pretty(&meta).map_err(|e| Error::json(&side, e))?;
        fs::write(&side, text).map_err(|e| Error::io(&side, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let side = sidecar_path(path);
        let text = fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
        let meta: ModelMeta = serde_json::from_str(&text).map_err(|e| Error::json(&side, e))?;
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let bad = |msg: String| Error::format("FEN1", format!("{}: {msg}", path.display()));
        if bytes.len() < 8 || &bytes[..4] != MAGIC {
            return Err(bad("missing FEN1 magic".into()));
        }
        let layers = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes")) as usize;
        if layers != meta.spec.layers.len() {
            return Err(bad(format!("{layers} layers in file, {} in sidecar", meta.spec.layers.len())));
        }
        let header = 8 + 8 * layers;
        if bytes.len() < header {
            return Err(bad("truncated header".into()));
        }
        let counts: Vec<usize> = bytes[8..header]
            .chunks_exact(8)
            .map(|c| u64::from_le_bytes(c.try_into().expect("8 bytes")) as usize)
            .collect();
        let total: usize = counts.iter().sum();
        if bytes.len() != header + 8 * total {
            return Err(bad(format!("expected {} payload bytes, found {}", 8 * total, bytes.len() - header)));
        }
        let params = bytes[header..]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let net = Network::from_params(meta.spec.clone(), params)?;
        if net.spec().param_counts()? != counts {
            return Err(bad("per-layer parameter counts do not match the network layout".into()));
        }
        Ok(Self { net, meta })
    }
}

/// Facial network output for one crop.
pub fn predict_expression(net: &Network, image: &SampleImage) -> Result<Vec<f64>> {
    let pixels = image_pixels(image);
    Ok(predict_batch(net, &[&pixels])?.remove(0))
}

/// Eye state for one crop. The pupil centre is measured from the crop's
/// top-left corner, in full-frame pixels.
pub fn predict_eye(model: &Model, image: &GrayImage) -> Result<EyeState> {
    let out = predict_batch(&model.net, &[image.data()])?.remove(0);
    Ok(eye_state(model, &out, (0, 0)))
}

/// Converts raw eye-network outputs into an [`EyeState`] for a crop at the
/// given `(row, col)` offset in the downscaled frame.
pub fn eye_state(model: &Model, out: &[f64], offset: (usize, usize)) -> EyeState {
    let y = match &model.meta.target_norm {
        Some(n) => n.denormalise(out),
        None => out.to_vec(),
    };
    let scale = model.meta.frame_scale.unwrap_or([1.0, 1.0]);
    state_from_target([y[0], y[1], y[2], y[3], y[4]], offset, (scale[0], scale[1]))
}

/// Planar `u8` pixels in network input order.
pub fn image_pixels(image: &SampleImage) -> Vec<u8> {
    match image {
        SampleImage::Gray(g) => g.data().to_vec(),
        SampleImage::Rgb(c) => {
            let n = c.rows() * c.cols();
            let mut out = vec![0; 3 * n];
            for (i, px) in c.data().chunks_exact(3).enumerate() {
                for ch in 0..3 {
                    out[ch * n + i] = px[ch];
                }
            }
            out
        }
    }
}

fn expect_kind(manifest: &DatasetManifest, kind: DatasetKind) -> Result<()> {
    if manifest.kind != kind {
        return Err(Error::InvalidInput(format!("expected a {kind:?} dataset, found {:?}", manifest.kind)));
    }
    Ok(())
}

/// Label parameters and pose of a face sample.
pub fn face_label_state(manifest: &DatasetManifest, basis: &FaceBasis, label: &FaceLabel) -> Result<(FaceParams, Pose)> {
    let subject = manifest.face_subject(label.subject)?;
    let params = FaceParams::new(subject.x_id.clone(), label.x_exp.clone(), subject.x_alb.clone())?;
    check_len("expression label", basis.dim_exp(), label.x_exp.len())?;
    Ok((params, Pose::from_array(&label.pose)?))
}

/// Face samples of `split` with their loss kernels (one per base frame,
/// computed with the headset as occluder). `weights = L2_ONLY` skips the
/// kernels.
pub fn face_training_samples(
    dir: &Path,
    manifest: &DatasetManifest,
    basis: &FaceBasis,
    occluders: &[Mesh],
    weights: LossWeights,
    split: Split,
) -> Result<Vec<TrainSample>> {
    expect_kind(manifest, DatasetKind::Face)?;
    let labels: Vec<FaceLabel> = read_labels(dir, manifest)?;
    let indices = manifest.split_indices(split);
    let mut kernels = BTreeMap::new();
    if weights != LossWeights::L2_ONLY {
        for &idx in &indices {
            let label = &labels[idx];
            if kernels.contains_key(&label.frame) {
                continue;
            }
            let (params, pose) = face_label_state(manifest, basis, label)?;
            let vis = if weights.dense != 0.0 {
                loss_visibility(basis, &params, &pose, occluders)?
            } else {
                Vec::new()
            };
            kernels.insert(label.frame, facial_kernel(basis, &pose, weights, &vis));
        }
    }
    let scale = kernel_scale(kernels.values());
    let kernels: BTreeMap<usize, Arc<DMatrix<f64>>> =
        kernels.into_iter().map(|(f, q)| (f, Arc::new(q * scale))).collect();
    indices
        .into_iter()
        .map(|idx| {
            let (record, label) = (&manifest.samples[idx], &labels[idx]);
            Ok(TrainSample {
                pixels: image_pixels(&read_sample_image(dir, record)?),
                target: label.x_exp.clone(),
                kernel: kernels.get(&label.frame).cloned(),
            })
        })
        .collect()
}

/// Factor that brings the mean eigenvalue of a set of loss kernels to one,
/// so the combined loss has the same average curvature as the plain L2
/// loss and both train under one learning-rate schedule. The relative
/// weighting of the three terms is untouched.
pub fn kernel_scale<'a>(kernels: impl Iterator<Item = &'a DMatrix<f64>>) -> f64 {
    let (mut trace, mut dims) = (0.0, 0usize);
    for q in kernels {
        trace += q.trace();
        dims += q.nrows();
    }
    if trace > 0.0 {
        dims as f64 / trace
    } else {
        1.0
    }
}

/// `(rows, cols)` factor from full frame to the downscaled eye frame.
pub fn eye_frame_scale(manifest: &DatasetManifest) -> Result<(f64, f64)> {
    let eye = manifest
        .eye
        .as_ref()
        .ok_or_else(|| Error::format("manifest", "eye dataset without eye metadata"))?;
    Ok((
        eye.downscale_rows as f64 / eye.frame_rows as f64,
        eye.downscale_cols as f64 / eye.frame_cols as f64,
    ))
}

/// Raw eye targets of `split` in manifest order with their images.
pub fn eye_samples(dir: &Path, manifest: &DatasetManifest, split: Split) -> Result<Vec<(EyeLabel, GrayImage)>> {
    expect_kind(manifest, DatasetKind::Eye)?;
    let labels: Vec<EyeLabel> = read_labels(dir, manifest)?;
    manifest
        .split_indices(split)
        .into_iter()
        .map(|i| match read_sample_image(dir, &manifest.samples[i])? {
            SampleImage::Gray(g) => Ok((labels[i].clone(), g)),
            SampleImage::Rgb(_) => Err(Error::format("eye dataset", "eye samples must be grayscale")),
        })
        .collect()
}

/// Standardised eye training samples and the statistics used.
pub fn eye_training_samples(dir: &Path, manifest: &DatasetManifest, split: Split) -> Result<(Vec<TrainSample>, TargetNorm)> {
    let scale = eye_frame_scale(manifest)?;
    let raw = eye_samples(dir, manifest, split)?;
    let targets: Vec<Vec<f64>> = raw.iter().map(|(l, _)| eye_target(l, scale).to_vec()).collect();
    let norm = TargetNorm::fit(&targets)?;
    let samples = raw
        .into_iter()
        .zip(targets)
        .map(|((_, img), t)| TrainSample {
            pixels: img.data().to_vec(),
            target: norm.normalise(&t),
            kernel: None,
        })
        .collect();
    Ok((samples, norm))
}
