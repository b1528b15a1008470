//! Per-frame capture: pose, expression and gaze combined into avatar
//! states, plus retargeting, export, evaluation metrics and timing.

mod eval;

pub use eval::{
    bench_pipeline, eval_eye, eval_face, eye_config, face_config, face_labels, held_out_eye_frames, render_face_frame,
    BenchFrame, EyeEvalReport, EyeFrameSample, FaceEvalReport,
};

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::dataset::{read_labels, DatasetManifest, FaceLabel, SampleImage};
use crate::error::{check_len, Error, Result};
use crate::face_model::{landmarks_2d, FaceBasis, FaceParams, LandmarkSet, Pose};
use crate::image::GrayImage;
use crate::nets::{eye_state, predict_batch, Model, Network};
use crate::synth_eye::{angular_error, gaze_to_vector, EyeState};
use crate::synth_face::{crop_face_region, Raster, CROP_COLS, CROP_ROWS, REGION_COLS, REGION_ROWS};

/// Wall-clock milliseconds per stage of [`process_frame`].
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct StageTimings {
    pub face_ms: f64,
    pub eye_ms: f64,
    pub total_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(into = "AvatarRecord", try_from = "AvatarRecord")]
pub struct AvatarState {
    pub frame: usize,
    pub x_id: Vec<f64>,
    pub x_alb: Vec<f64>,
    pub x_exp: Vec<f64>,
    pub pose: Pose,
    pub left_eye: EyeState,
    pub right_eye: EyeState,
    pub timings: StageTimings,
}

/// Flat JSON form of [`AvatarState`]; eyes are `(pitch, yaw, size, x, y)`.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct AvatarRecord {
    frame: usize,
    x_id: Vec<f64>,
    x_alb: Vec<f64>,
    x_exp: Vec<f64>,
    pose: Vec<f64>,
    left_eye: [f64; 5],
    right_eye: [f64; 5],
    timings: StageTimings,
}

impl From<AvatarState> for AvatarRecord {
    fn from(s: AvatarState) -> Self {
        Self {
            frame: s.frame,
            x_id: s.x_id,
            x_alb: s.x_alb,
            x_exp: s.x_exp,
            pose: s.pose.to_array().to_vec(),
            left_eye: s.left_eye.to_array(),
            right_eye: s.right_eye.to_array(),
            timings: s.timings,
        }
    }
}

impl TryFrom<AvatarRecord> for AvatarState {
    type Error = Error;

    fn try_from(r: AvatarRecord) -> Result<Self> {
        Ok(Self {
            frame: r.frame,
            x_id: r.x_id,
            x_alb: r.x_alb,
            x_exp: r.x_exp,
            pose: Pose::from_array(&r.pose)?,
            left_eye: EyeState::from_array(r.left_eye),
            right_eye: EyeState::from_array(r.right_eye),
            timings: r.timings,
        })
    }
}

impl AvatarState {
    pub fn params(&self) -> Result<FaceParams> {
        FaceParams::new(self.x_id.clone(), self.x_exp.clone(), self.x_alb.clone())
    }

    fn check(&self, basis: &FaceBasis) -> Result<()> {
        check_len("x_id", basis.dim_id(), self.x_id.len())?;
        check_len("x_exp", basis.dim_exp(), self.x_exp.len())?;
        check_len("x_alb", basis.dim_alb(), self.x_alb.len())
    }
}

/// Source of per-frame head poses.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PoseProvider {
    poses: BTreeMap<usize, Pose>,
}

impl PoseProvider {
    pub fn new(poses: BTreeMap<usize, Pose>) -> Self {
        Self { poses }
    }

    /// Ground-truth poses of a face corpus, one per base frame.
    pub fn from_manifest(dir: &Path, manifest: &DatasetManifest) -> Result<Self> {
        let labels: Vec<FaceLabel> = read_labels(dir, manifest)?;
        let mut poses = BTreeMap::new();
        for l in labels {
            if let std::collections::btree_map::Entry::Vacant(e) = poses.entry(l.frame) {
                e.insert(Pose::from_array(&l.pose)?);
            }
        }
        Ok(Self { poses })
    }

    /// JSON object mapping frame id to the 12-number pose array.
    pub fn read_json(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let raw: BTreeMap<String, Vec<f64>> = serde_json::from_str(&text).map_err(|e| Error::json(path, e))?;
        let mut poses = BTreeMap::new();
        for (k, v) in raw {
            let frame = k
                .parse()
                .map_err(|_| Error::format("poses", format!("{}: bad frame id {k:?}", path.display())))?;
            poses.insert(frame, Pose::from_array(&v)?);
        }
        Ok(Self { poses })
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        let raw: BTreeMap<String, Vec<f64>> =
            self.poses.iter().map(|(k, p)| (k.to_string(), p.to_array().to_vec())).collect();
        let text = serde_json::to_string_pretty(&raw).map_err(|e| Error::json(path, e))?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn get(&self, frame: usize) -> Option<&Pose> {
        self.poses.get(&frame)
    }

    pub fn len(&self) -> usize {
        self.poses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.poses.is_empty()
    }
}

/// Expression coefficients from a 112×224 lower-face crop.
pub trait ExpressionRegressor {
    fn predict_expression(&self, crop: &SampleImage, frame: usize) -> Result<Vec<f64>>;
}

/// Eye state from an eye crop at `offset` (row, col) in the downscaled frame.
pub trait EyeRegressor {
    fn predict_eye(&self, crop: &GrayImage, offset: (usize, usize), frame: usize, eye: usize) -> Result<EyeState>;
}

impl ExpressionRegressor for Network {
    fn predict_expression(&self, crop: &SampleImage, _frame: usize) -> Result<Vec<f64>> {
        crate::nets::predict_expression(self, crop)
    }
}

impl EyeRegressor for Model {
    fn predict_eye(&self, crop: &GrayImage, offset: (usize, usize), _frame: usize, _eye: usize) -> Result<EyeState> {
        let out = predict_batch(&self.net, &[crop.data()])?.remove(0);
        Ok(eye_state(self, &out, offset))
    }
}

/// Returns stored labels by frame id; for plumbing checks.
#[derive(Debug, Clone, Default)]
pub struct OracleExpression(pub BTreeMap<usize, Vec<f64>>);

impl ExpressionRegressor for OracleExpression {
    fn predict_expression(&self, _crop: &SampleImage, frame: usize) -> Result<Vec<f64>> {
        self.0
            .get(&frame)
            .cloned()
            .ok_or_else(|| Error::InvalidInput(format!("no expression label for frame {frame}")))
    }
}

/// Returns stored `[left, right]` eye labels by frame id.
#[derive(Debug, Clone, Default)]
pub struct OracleEye(pub BTreeMap<usize, [EyeState; 2]>);

impl EyeRegressor for OracleEye {
    fn predict_eye(&self, _crop: &GrayImage, _offset: (usize, usize), frame: usize, eye: usize) -> Result<EyeState> {
        self.0
            .get(&frame)
            .map(|e| e[eye])
            .ok_or_else(|| Error::InvalidInput(format!("no eye label for frame {frame}")))
    }
}

/// Geometry of the eye-network input: full IR frame → area-downscaled frame
/// → centred crop.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EyeInputGeometry {
    pub downscale_rows: usize,
    pub downscale_cols: usize,
    pub crop_rows: usize,
    pub crop_cols: usize,
}

impl Default for EyeInputGeometry {
    fn default() -> Self {
        Self {
            downscale_rows: 108,
            downscale_cols: 144,
            crop_rows: 87,
            crop_cols: 135,
        }
    }
}

impl EyeInputGeometry {
    /// Centre crop of the downscaled frame and its `(row, col)` offset.
    pub fn prepare(&self, frame: &GrayImage) -> Result<(GrayImage, (usize, usize))> {
        let down = frame.downscale_area(self.downscale_rows, self.downscale_cols)?;
        if self.crop_rows > self.downscale_rows || self.crop_cols > self.downscale_cols {
            return Err(Error::InvalidInput("eye crop larger than the downscaled frame".into()));
        }
        let off = (
            (self.downscale_rows - self.crop_rows) / 2,
            (self.downscale_cols - self.crop_cols) / 2,
        );
        Ok((down.crop(off.0, off.1, self.crop_rows, self.crop_cols)?, off))
    }
}

/// Everything [`process_frame`] needs besides the per-frame images.
pub struct CaptureRig<'a> {
    pub basis: &'a FaceBasis,
    pub identity: &'a FaceParams,
    pub face: &'a dyn ExpressionRegressor,
    pub eyes: &'a dyn EyeRegressor,
    pub eye_geometry: EyeInputGeometry,
}

/// Lower-face network input for a full face frame: the 120×230 region
/// around the neutral landmarks, centre-cropped to 112×224.
pub fn face_input(frame: &SampleImage, pose: &Pose, basis: &FaceBasis, identity: &FaceParams) -> Result<SampleImage> {
    let neutral = identity.with_expression(&vec![0.0; basis.dim_exp()]);
    let region = crop_face_region(frame, pose, basis, &neutral)?;
    region.image.window(
        (REGION_ROWS - CROP_ROWS) / 2,
        (REGION_COLS - CROP_COLS) / 2,
        CROP_ROWS,
        CROP_COLS,
    )
}

/// Runs both regressors on one frame. Returns `Ok(None)` (with a warning)
/// when no pose is available for the frame.
pub fn process_frame(
    rig: &CaptureRig<'_>,
    frame: usize,
    face: &SampleImage,
    eyes: [&GrayImage; 2],
    pose: Option<&Pose>,
) -> Result<Option<AvatarState>> {
    let Some(pose) = pose else {
        log::warn!("frame {frame}: no pose available, skipped");
        return Ok(None);
    };
    let t0 = Instant::now();
    let crop = face_input(face, pose, rig.basis, rig.identity)?;
    let x_exp = rig.face.predict_expression(&crop, frame)?;
    check_len("predicted expression", rig.basis.dim_exp(), x_exp.len())?;
    let t1 = Instant::now();
    let mut states = [EyeState::from_array([0.0; 5]); 2];
    for (i, img) in eyes.iter().enumerate() {
        let (crop, off) = rig.eye_geometry.prepare(img)?;
        states[i] = rig.eyes.predict_eye(&crop, off, frame, i)?;
    }
    let t2 = Instant::now();
    let ms = |d: std::time::Duration| d.as_secs_f64() * 1e3;
    Ok(Some(AvatarState {
        frame,
        x_id: rig.identity.x_id.iter().copied().collect(),
        x_alb: rig.identity.x_alb.iter().copied().collect(),
        x_exp,
        pose: *pose,
        left_eye: states[0],
        right_eye: states[1],
        timings: StageTimings {
            face_ms: ms(t1 - t0),
            eye_ms: ms(t2 - t1),
            total_ms: ms(t2 - t0),
        },
    }))
}

/// Replaces identity and albedo; motion (expression, pose, gaze) is kept.
pub fn retarget(state: &AvatarState, x_id: &[f64], x_alb: &[f64]) -> Result<AvatarState> {
    check_len("retarget x_id", state.x_id.len(), x_id.len())?;
    check_len("retarget x_alb", state.x_alb.len(), x_alb.len())?;
    Ok(AvatarState {
        x_id: x_id.to_vec(),
        x_alb: x_alb.to_vec(),
        ..state.clone()
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct GazeRecord {
    pitch: f64,
    yaw: f64,
    vector: [f64; 3],
}

fn gaze_record(e: &EyeState) -> GazeRecord {
    let v = gaze_to_vector(e.pitch, e.yaw);
    GazeRecord {
        pitch: e.pitch,
        yaw: e.yaw,
        vector: [v.x, v.y, v.z],
    }
}

/// Gaze sidecar path written next to an OBJ export.
pub fn gaze_path(obj: &Path) -> PathBuf {
    obj.with_extension("gaze.json")
}

/// Writes the posed-free avatar mesh as OBJ (`v x y z r g b`, colours from
/// the albedo model clamped to `[0, 1]`, 9 significant digits) and the two
/// gaze directions as JSON next to it.
pub fn export_avatar(state: &AvatarState, basis: &FaceBasis, path: &Path) -> Result<()> {
    state.check(basis)?;
    let params = state.params()?;
    let mesh = basis.evaluate_shape(&params)?;
    let albedo = basis.evaluate_albedo(&params)?;
    let mut out = String::with_capacity(64 * mesh.n_vertices());
    writeln!(out, "# frame {}", state.frame).expect("string write");
    for (v, c) in mesh.vertices.chunks_exact(3).zip(albedo.chunks_exact(3)) {
        writeln!(
            out,
            "v {:.8e} {:.8e} {:.8e} {:.8e} {:.8e} {:.8e}",
            v[0],
            v[1],
            v[2],
            c[0].clamp(0.0, 1.0),
            c[1].clamp(0.0, 1.0),
            c[2].clamp(0.0, 1.0)
        )
        .expect("string write");
    }
    for t in mesh.triangles.iter() {
        writeln!(out, "f {} {} {}", t[0] + 1, t[1] + 1, t[2] + 1).expect("string write");
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))?;
    let gaze = serde_json::json!({
        "frame": state.frame,
        "left": gaze_record(&state.left_eye),
        "right": gaze_record(&state.right_eye),
    });
    let gpath = gaze_path(path);
    let text = serde_json::to_string_pretty(&gaze).map_err(|e| Error::json(&gpath, e))?;
    fs::write(&gpath, text).map_err(|e| Error::io(&gpath, e))
}

/// Vertex positions of an OBJ file (`v` lines, first three numbers).
pub fn read_obj_vertices(path: &Path) -> Result<Vec<[f64; 3]>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let mut it = line.split_whitespace();
        if it.next() != Some("v") {
            continue;
        }
        let mut v = [0.0; 3];
        for slot in &mut v {
            *slot = it
                .next()
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| Error::format("obj", format!("{}:{}: bad vertex", path.display(), n + 1)))?;
        }
        out.push(v);
    }
    Ok(out)
}

fn pair_by_frame<'a>(
    predicted: &'a [AvatarState],
    truth: &'a [AvatarState],
) -> Result<Vec<(&'a AvatarState, &'a AvatarState)>> {
    if predicted.len() != truth.len() {
        return Err(Error::InvalidInput(format!(
            "{} predicted states for {} ground-truth frames",
            predicted.len(),
            truth.len()
        )));
    }
    predicted
        .iter()
        .zip(truth)
        .map(|(p, t)| {
            if p.frame != t.frame {
                Err(Error::InvalidInput(format!("frame id mismatch: {} vs {}", p.frame, t.frame)))
            } else {
                Ok((p, t))
            }
        })
        .collect()
}

/// Mean L2 distance, in pixels, between the projected lower-face landmarks
/// of predicted and ground-truth states (each with its own parameters and
/// pose), over all frames and landmarks.
pub fn mean_landmark_error(predicted: &[AvatarState], truth: &[AvatarState], basis: &FaceBasis) -> Result<f64> {
    let pairs = pair_by_frame(predicted, truth)?;
    if pairs.is_empty() {
        return Err(Error::InvalidInput("no frames to evaluate".into()));
    }
    let mut sum = 0.0;
    let mut n = 0usize;
    for (p, t) in pairs {
        p.check(basis)?;
        t.check(basis)?;
        let a = landmarks_2d(basis, &p.params()?, &p.pose, LandmarkSet::Lower)?;
        let b = landmarks_2d(basis, &t.params()?, &t.pose, LandmarkSet::Lower)?;
        sum += a.iter().zip(&b).map(|(x, y)| (x - y).norm()).sum::<f64>();
        n += a.len();
    }
    Ok(sum / n as f64)
}

/// Mean angle, in degrees, between predicted and labelled gaze directions.
pub fn mean_gaze_error(predicted: &[EyeState], labels: &[EyeState]) -> Result<f64> {
    check_len("gaze predictions", labels.len(), predicted.len())?;
    if labels.is_empty() {
        return Err(Error::InvalidInput("no gaze samples to evaluate".into()));
    }
    let sum: f64 = predicted
        .iter()
        .zip(labels)
        .map(|(p, l)| angular_error((p.pitch, p.yaw), (l.pitch, l.yaw)).to_degrees())
        .sum();
    Ok(sum / labels.len() as f64)
}

/// Ground-truth states of every face sample of a corpus (eyes at rest).
pub fn face_ground_truth(dir: &Path, manifest: &DatasetManifest, basis: &FaceBasis) -> Result<Vec<AvatarState>> {
    let labels: Vec<FaceLabel> = read_labels(dir, manifest)?;
    labels
        .iter()
        .map(|l| {
            let (params, pose) = crate::nets::face_label_state(manifest, basis, l)?;
            Ok(AvatarState {
                frame: l.id,
                x_id: params.x_id.iter().copied().collect(),
                x_alb: params.x_alb.iter().copied().collect(),
                x_exp: l.x_exp.clone(),
                pose,
                left_eye: EyeState::from_array([0.0; 5]),
                right_eye: EyeState::from_array([0.0; 5]),
                timings: StageTimings::default(),
            })
        })
        .collect()
}

pub const WARMUP_FRAMES: usize = 5;

/// Summary of per-frame wall-clock times in milliseconds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimingStats {
    pub frames: usize,
    pub mean_ms: f64,
    pub median_ms: f64,
    pub p95_ms: f64,
}

impl TimingStats {
    pub fn from_samples(ms: &[f64]) -> Result<Self> {
        if ms.is_empty() {
            return Err(Error::InvalidInput("no timing samples".into()));
        }
        let mut s = ms.to_vec();
        s.sort_by(f64::total_cmp);
        let pick = |q: f64| s[((q * (s.len() - 1) as f64).round() as usize).min(s.len() - 1)];
        Ok(Self {
            frames: s.len(),
            mean_ms: s.iter().sum::<f64>() / s.len() as f64,
            median_ms: pick(0.5),
            p95_ms: pick(0.95),
        })
    }
}

/// Times `f` on frames `0..frames` after running it on the first
/// [`WARMUP_FRAMES`] frames untimed.
pub fn benchmark(frames: usize, mut f: impl FnMut(usize) -> Result<()>) -> Result<TimingStats> {
    if frames < 10 {
        return Err(Error::InvalidInput(format!("benchmark needs ≥ 10 frames, got {frames}")));
    }
    for i in 0..WARMUP_FRAMES.min(frames) {
        f(i)?;
    }
    let mut ms = Vec::with_capacity(frames);
    for i in 0..frames {
        let t = Instant::now();
        f(i)?;
        ms.push(t.elapsed().as_secs_f64() * 1e3);
    }
    TimingStats::from_samples(&ms)
}

/// Reference per-frame figures reported for the original system.
pub const REFERENCE_FACE_MS: f64 = 31.5;
pub const REFERENCE_EYE_MS: f64 = 2.18;
pub const REFERENCE_BASELINE_MS: f64 = 136.9;
pub const REFERENCE_FPS: f64 = 30.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub face_net: TimingStats,
    pub eye_net: TimingStats,
    pub pupil_baseline: TimingStats,
    pub end_to_end: TimingStats,
}

impl BenchReport {
    /// Plain-text table of measured against reference timings.
    pub fn comparison_table(&self) -> String {
        let mut s = String::new();
        writeln!(s, "{:<22} {:>10} {:>10} {:>10} {:>12}", "stage", "mean ms", "median ms", "p95 ms", "reference").unwrap();
        let row = |s: &mut String, name: &str, t: &TimingStats, reference: String| {
            writeln!(s, "{:<22} {:>10.3} {:>10.3} {:>10.3} {:>12}", name, t.mean_ms, t.median_ms, t.p95_ms, reference).unwrap();
        };
        row(&mut s, "facial network", &self.face_net, format!("{REFERENCE_FACE_MS} ms"));
        row(&mut s, "eye network (per eye)", &self.eye_net, format!("{REFERENCE_EYE_MS} ms"));
        row(&mut s, "pupil baseline", &self.pupil_baseline, format!("{REFERENCE_BASELINE_MS} ms"));
        row(&mut s, "end to end", &self.end_to_end, format!("{REFERENCE_FPS} fps"));
        let fps = 1e3 / self.end_to_end.mean_ms.max(1e-9);
        writeln!(s, "end-to-end throughput: {fps:.1} fps (reference {REFERENCE_FPS} fps)").unwrap();
        writeln!(
            s,
            "eye network faster than pupil baseline: {}",
            self.eye_net.mean_ms < self.pupil_baseline.mean_ms
        )
        .unwrap();
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth_face::{gen_basis, render_face, SyntheticBasisSpec};
    use nalgebra::{DVector, Vector2};
    use std::sync::OnceLock;

    fn basis() -> &'static FaceBasis {
        static B: OnceLock<FaceBasis> = OnceLock::new();
        B.get_or_init(|| gen_basis(&SyntheticBasisSpec::desk(21)).unwrap())
    }

    fn state(frame: usize) -> AvatarState {
        let b = basis();
        let exp: Vec<f64> = (0..b.dim_exp()).map(|k| 0.1 * (k as f64 + 1.0) * if frame.is_multiple_of(2) { 1.0 } else { -1.0 }).collect();
        AvatarState {
            frame,
            x_id: (0..b.dim_id()).map(|k| 0.05 * k as f64).collect(),
            x_alb: vec![0.1; b.dim_alb()],
            x_exp: exp,
            pose: Pose::from_angles(0.1, -0.05, 0.02, Vector2::new(176.0, 150.0), 100.0).unwrap(),
            left_eye: EyeState::from_array([0.1, -0.2, 30.0, 150.0, 120.0]),
            right_eye: EyeState::from_array([0.1, 0.2, 31.0, 170.0, 121.0]),
            timings: StageTimings::default(),
        }
    }

    #[test]
    fn landmark_error_examples() {
        let truth = vec![state(0), state(1)];
        assert_eq!(mean_landmark_error(&truth, &truth, basis()).unwrap(), 0.0);
        let shifted: Vec<AvatarState> = truth
            .iter()
            .map(|s| AvatarState {
                pose: s.pose.with_translation(s.pose.translation() + Vector2::new(3.0, 4.0)),
                ..s.clone()
            })
            .collect();
        assert!((mean_landmark_error(&shifted, &truth, basis()).unwrap() - 5.0).abs() < 1e-9);
        assert!(mean_landmark_error(&shifted[..1], &truth, basis()).is_err());
        let mut wrong = shifted.clone();
        wrong[0].frame = 7;
        assert!(mean_landmark_error(&wrong, &truth, basis()).is_err());
    }

    #[test]
    fn gaze_error_examples() {
        let a = EyeState::from_array([0.0, 0.0, 20.0, 0.0, 0.0]);
        let b = EyeState::from_array([0.0, std::f64::consts::FRAC_PI_2, 20.0, 0.0, 0.0]);
        assert_eq!(mean_gaze_error(&[a], &[a]).unwrap(), 0.0);
        assert!((mean_gaze_error(&[a], &[b]).unwrap() - 90.0).abs() < 1e-9);
        assert!(mean_gaze_error(&[a], &[]).is_err());
    }

    #[test]
    fn retarget_round_trip_keeps_motion() {
        let s = state(0);
        let other_id = vec![0.3; s.x_id.len()];
        let other_alb = vec![-0.2; s.x_alb.len()];
        let r = retarget(&s, &other_id, &other_alb).unwrap();
        assert_eq!(r.x_exp, s.x_exp);
        assert_eq!((r.pose, r.left_eye, r.right_eye), (s.pose, s.left_eye, s.right_eye));
        assert_eq!(retarget(&r, &s.x_id, &s.x_alb).unwrap(), s);
        assert!(retarget(&s, &[0.0], &other_alb).is_err());

        // expression offset is independent of identity
        let b = basis();
        let offset = |id: &[f64]| {
            let with = b.evaluate_shape(&FaceParams::new(id.to_vec(), s.x_exp.clone(), s.x_alb.clone()).unwrap()).unwrap();
            let without = b.evaluate_shape(&FaceParams::new(id.to_vec(), vec![0.0; b.dim_exp()], s.x_alb.clone()).unwrap()).unwrap();
            with.vertices.iter().zip(&without.vertices).map(|(a, c)| a - c).collect::<Vec<f64>>()
        };
        let direct = &b.axes_exp * DVector::from_column_slice(&s.x_exp);
        for (a, c) in offset(&other_id).iter().zip(direct.iter()) {
            assert!((a - c).abs() < 1e-10);
        }
        // metrics on motion do not change under retargeting
        let truth = vec![s.clone()];
        let moved = vec![AvatarState {
            x_exp: s.x_exp.iter().map(|v| v * 0.5).collect(),
            ..s.clone()
        }];
        let before = mean_landmark_error(&moved, &truth, b).unwrap();
        let rt = |v: &[AvatarState]| -> Vec<AvatarState> { v.iter().map(|x| retarget(x, &x.x_id, &x.x_alb).unwrap()).collect() };
        assert_eq!(mean_landmark_error(&rt(&moved), &rt(&truth), b).unwrap(), before);
    }

    #[test]
    fn export_round_trips_vertices_and_unit_gaze() {
        let b = basis();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("avatar.obj");
        let s = state(0);
        export_avatar(&s, b, &path).unwrap();
        let verts = read_obj_vertices(&path).unwrap();
        let mesh = b.evaluate_shape(&s.params().unwrap()).unwrap();
        assert_eq!(verts.len(), mesh.n_vertices());
        for (v, m) in verts.iter().zip(mesh.vertices.chunks_exact(3)) {
            for a in 0..3 {
                assert!((v[a] - m[a]).abs() <= 1e-8 * m[a].abs().max(1e-300));
            }
        }
        let g: serde_json::Value = serde_json::from_str(&fs::read_to_string(gaze_path(&path)).unwrap()).unwrap();
        for eye in ["left", "right"] {
            let v: Vec<f64> = serde_json::from_value(g[eye]["vector"].clone()).unwrap();
            assert!((v.iter().map(|x| x * x).sum::<f64>().sqrt() - 1.0).abs() < 1e-12);
        }

        let zero = AvatarState {
            x_id: vec![0.0; b.dim_id()],
            x_exp: vec![0.0; b.dim_exp()],
            x_alb: vec![0.0; b.dim_alb()],
            ..s
        };
        export_avatar(&zero, b, &path).unwrap();
        for (v, m) in read_obj_vertices(&path).unwrap().iter().zip(b.mean_shape.as_slice().chunks_exact(3)) {
            for a in 0..3 {
                assert!((v[a] - m[a]).abs() <= 1e-8 * m[a].abs().max(1e-300));
            }
        }
    }

    #[test]
    fn oracle_regressors_reproduce_labels() {
        let b = basis();
        let truth = [state(0), state(1), state(2)];
        let identity = truth[0].params().unwrap();
        let face = OracleExpression(truth.iter().map(|s| (s.frame, s.x_exp.clone())).collect());
        let eyes = OracleEye(truth.iter().map(|s| (s.frame, [s.left_eye, s.right_eye])).collect());
        let rig = CaptureRig {
            basis: b,
            identity: &identity,
            face: &face,
            eyes: &eyes,
            eye_geometry: EyeInputGeometry::default(),
        };
        let poses = PoseProvider::new(truth.iter().map(|s| (s.frame, s.pose)).collect());
        let eye_img = GrayImage::new(240, 320, 120);
        let mut out = Vec::new();
        for s in &truth {
            let img = SampleImage::Gray(render_face(b, &s.params().unwrap(), &s.pose, 352, 288, nalgebra::Vector3::new(0.0, 0.0, 1.0)).unwrap());
            let st = process_frame(&rig, s.frame, &img, [&eye_img, &eye_img], poses.get(s.frame)).unwrap().unwrap();
            assert!(st.timings.face_ms > 0.0 && st.timings.eye_ms > 0.0 && st.timings.total_ms > 0.0);
            out.push(st);
        }
        assert_eq!(mean_landmark_error(&out, &truth, b).unwrap(), 0.0);
        let pred: Vec<EyeState> = out.iter().flat_map(|s| [s.left_eye, s.right_eye]).collect();
        let lab: Vec<EyeState> = truth.iter().flat_map(|s| [s.left_eye, s.right_eye]).collect();
        assert_eq!(mean_gaze_error(&pred, &lab).unwrap(), 0.0);
        for (a, t) in out.iter().zip(&truth) {
            assert_eq!(AvatarState { timings: StageTimings::default(), ..a.clone() }, *t);
        }
        // missing pose: skipped
        let img = SampleImage::Gray(GrayImage::new(288, 352, 0));
        assert!(process_frame(&rig, 99, &img, [&eye_img, &eye_img], None).unwrap().is_none());
    }

    #[test]
    fn avatar_json_round_trip() {
        let s = state(3);
        let text = serde_json::to_string(&s).unwrap();
        let back: AvatarState = serde_json::from_str(&text).unwrap();
        assert_eq!(back, s);
    }

    #[test]
    fn pose_provider_json_round_trip() {
        let p = PoseProvider::new((0..3).map(|f| (f, state(f).pose)).collect());
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("poses.json");
        p.write_json(&path).unwrap();
        assert_eq!(PoseProvider::read_json(&path).unwrap(), p);
    }

    #[test]
    fn benchmark_measures_sleep() {
        let stats = benchmark(10, |_| {
            std::thread::sleep(std::time::Duration::from_millis(10));
            Ok(())
        })
        .unwrap();
        assert!(stats.mean_ms >= 10.0 && stats.mean_ms <= 13.0, "{stats:?}");
        assert_eq!(stats.frames, 10);
        assert!(benchmark(9, |_| Ok(())).is_err());
    }

    #[test]
    fn timing_stats_order() {
        let s = TimingStats::from_samples(&(1..=100).map(f64::from).collect::<Vec<_>>()).unwrap();
        assert!((s.mean_ms - 50.5).abs() < 1e-12);
        assert!(s.median_ms >= 50.0 && s.median_ms <= 51.0);
        assert!(s.p95_ms >= 94.0 && s.p95_ms <= 96.0);
    }
}
