//! Landmark-driven model fitting: weak-perspective pose recovery and the
//! shared-identity / per-frame-expression alternation.

mod pose;

use std::collections::BTreeMap;
use std::path::Path;

use nalgebra::{DMatrix, DVector, Vector2, Vector3};
use serde::{Deserialize, Serialize};

pub use pose::{fit_pose, fit_pose_weighted, nearest_rotation, refine_pose, reprojection_energy};

use crate::error::{Error, Result};
use crate::face_model::{FaceBasis, FaceParams, Pose};

#[derive(Debug, Clone, PartialEq)]
pub struct LandmarkPoint {
    /// Vertex index in the basis.
    pub index: usize,
    /// `(x = col, y = row)` pixels.
    pub position: Vector2<f64>,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrameObservation {
    pub frame: usize,
    pub points: Vec<LandmarkPoint>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct LandmarkObservations {
    pub frames: Vec<FrameObservation>,
}

impl LandmarkObservations {
    /// Observations of `indices` under known parameters and poses.
    pub fn synthesize(basis: &FaceBasis, params: &[FaceParams], poses: &[Pose], indices: &[usize]) -> Result<Self> {
        crate::error::check_len("poses", params.len(), poses.len())?;
        let mut frames = Vec::with_capacity(params.len());
        for (f, (p, pose)) in params.iter().zip(poses).enumerate() {
            let mesh = basis.evaluate_shape(p)?;
            frames.push(FrameObservation {
                frame: f,
                points: indices
                    .iter()
                    .map(|&i| LandmarkPoint {
                        index: i,
                        position: pose.project(&mesh.vertex(i)),
                        weight: 1.0,
                    })
                    .collect(),
            });
        }
        Ok(Self { frames })
    }

    fn validate(&self, basis: &FaceBasis) -> Result<()> {
        if self.frames.is_empty() {
            return Err(Error::InvalidInput("no frames to fit".into()));
        }
        for f in &self.frames {
            if f.points.len() < 4 {
                return Err(Error::Degenerate(format!(
                    "frame {} has {} landmarks; at least 4 are needed",
                    f.frame,
                    f.points.len()
                )));
            }
            for p in &f.points {
                if p.index >= basis.n_vertices() {
                    return Err(Error::InvalidInput(format!(
                        "frame {}: landmark index {} out of range",
                        f.frame, p.index
                    )));
                }
                if !(p.weight > 0.0 && p.weight.is_finite()) || !p.position.iter().all(|v| v.is_finite()) {
                    return Err(Error::InvalidInput(format!("frame {}: invalid point", f.frame)));
                }
            }
        }
        Ok(())
    }

    /// Reads `{"<frame>": [[index, x, y(, weight)], ...], ...}`.
    pub fn read_json(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let raw: BTreeMap<String, Vec<Vec<f64>>> = serde_json::from_str(&text).map_err(|e| Error::json(path, e))?;
        let mut frames = Vec::with_capacity(raw.len());
        for (key, pts) in raw {
            let frame: usize = key
                .parse()
                .map_err(|_| Error::format("landmarks", format!("frame id {key:?} is not an integer")))?;
            let points = pts
                .iter()
                .map(|t| match t.as_slice() {
                    [i, x, y] | [i, x, y, _] if *i >= 0.0 && i.fract() == 0.0 => Ok(LandmarkPoint {
                        index: *i as usize,
                        position: Vector2::new(*x, *y),
                        weight: t.get(3).copied().unwrap_or(1.0),
                    }),
                    _ => Err(Error::format("landmarks", format!("frame {frame}: expected [index, x, y]"))),
                })
                .collect::<Result<_>>()?;
            frames.push(FrameObservation { frame, points });
        }
        frames.sort_by_key(|f| f.frame);
        Ok(Self { frames })
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        let map: BTreeMap<String, Vec<Vec<f64>>> = self
            .frames
            .iter()
            .map(|f| {
                (
                    f.frame.to_string(),
                    f.points
                        .iter()
                        .map(|p| vec![p.index as f64, p.position.x, p.position.y, p.weight])
                        .collect(),
                )
            })
            .collect();
        let text = serde_json::to_string_pretty(&map).map_err(|e| Error::json(path, e))?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FitConfig {
    pub max_iterations: usize,
    /// Initial Levenberg–Marquardt damping for the pose steps.
    pub damping: f64,
    /// Tikhonov weight on `Σ (x_k / σ_k)²`.
    pub reg_weight: f64,
    /// Stop when one outer iteration lowers the objective by less than
    /// `tolerance · (1 + E)`.
    pub tolerance: f64,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            max_iterations: 200,
            damping: 1e-3,
            reg_weight: 5e-5,
            tolerance: 1e-12,
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_iterations == 0 || !(self.damping > 0.0) || !(self.reg_weight > 0.0) || !(self.tolerance > 0.0) {
            return Err(Error::InvalidInput("fit config values must all be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct FitResult {
    pub x_id: DVector<f64>,
    pub x_exp: Vec<DVector<f64>>,
    pub poses: Vec<Pose>,
    pub frame_ids: Vec<usize>,
    /// Objective after initialisation and after every outer iteration.
    pub objective_history: Vec<f64>,
    pub converged: bool,
    pub iterations: usize,
}

impl FitResult {
    pub fn params(&self, frame: usize, basis: &FaceBasis) -> FaceParams {
        FaceParams {
            x_id: self.x_id.clone(),
            x_exp: self.x_exp[frame].clone(),
            x_alb: DVector::zeros(basis.dim_alb()),
        }
    }

    /// Root-mean-square landmark reprojection error in pixels (unweighted).
    pub fn reprojection_rms(&self, basis: &FaceBasis, obs: &LandmarkObservations) -> Result<f64> {
        let mut sum = 0.0;
        let mut n = 0usize;
        for (f, fo) in obs.frames.iter().enumerate() {
            let mesh = basis.evaluate_shape(&self.params(f, basis))?;
            for p in &fo.points {
                sum += (self.poses[f].project(&mesh.vertex(p.index)) - p.position).norm_squared();
                n += 1;
            }
        }
        Ok((sum / n.max(1) as f64).sqrt())
    }
}

/// Per-frame landmark geometry gathered once.
struct FrameData<'a> {
    obs: &'a FrameObservation,
    weights: Vec<f64>,
    targets: Vec<Vector2<f64>>,
}

fn landmark_positions(basis: &FaceBasis, x_id: &DVector<f64>, x_exp: &DVector<f64>, idx: &[usize]) -> Vec<Vector3<f64>> {
    idx.iter()
        .map(|&k| {
            let rows = 3 * k..3 * k + 3;
            let mut v = Vector3::new(basis.mean_shape[3 * k], basis.mean_shape[3 * k + 1], basis.mean_shape[3 * k + 2]);
            for (a, axis) in rows.clone().enumerate() {
                v[a] += basis.axes_id.row(axis).dot(&x_id.transpose());
                v[a] += basis.axes_exp.row(axis).dot(&x_exp.transpose());
            }
            v
        })
        .collect()
}

fn regulariser(x: &DVector<f64>, sigma: &[f64]) -> f64 {
    x.iter().zip(sigma).map(|(v, s)| (v / s).powi(2)).sum()
}

fn objective(
    basis: &FaceBasis,
    frames: &[FrameData<'_>],
    x_id: &DVector<f64>,
    x_exp: &[DVector<f64>],
    poses: &[Pose],
    w_r: f64,
) -> f64 {
    let mut e = w_r * regulariser(x_id, &basis.sigma_id);
    for (f, fd) in frames.iter().enumerate() {
        let idx: Vec<usize> = fd.obs.points.iter().map(|p| p.index).collect();
        let pts = landmark_positions(basis, x_id, &x_exp[f], &idx);
        e += reprojection_energy(&poses[f], &pts, &fd.targets, Some(&fd.weights));
        e += w_r * regulariser(&x_exp[f], &basis.sigma_exp);
    }
    e
}

/// Exact minimiser of the objective over `x_id` and every `x_exp_f` with
/// poses fixed. The per-frame expression blocks are eliminated through
/// their Schur complement, leaving a `D_id × D_id` system.
fn solve_coefficients(
    basis: &FaceBasis,
    frames: &[FrameData<'_>],
    poses: &[Pose],
    w_r: f64,
) -> Result<(DVector<f64>, Vec<DVector<f64>>)> {
    let (d_id, d_exp) = (basis.dim_id(), basis.dim_exp());
    let mut reduced = DMatrix::from_diagonal(&DVector::from_iterator(
        d_id,
        basis.sigma_id.iter().map(|s| w_r / (s * s)),
    ));
    let mut rhs = DVector::zeros(d_id);
    let w_exp = DMatrix::from_diagonal(&DVector::from_iterator(
        d_exp,
        basis.sigma_exp.iter().map(|s| w_r / (s * s)),
    ));
    let mut per_frame = Vec::with_capacity(frames.len());
    for (f, fd) in frames.iter().enumerate() {
        let m = 2 * fd.obs.points.len();
        let mut b = DMatrix::zeros(m, d_id);
        let mut c = DMatrix::zeros(m, d_exp);
        let mut d = DVector::zeros(m);
        let pose = &poses[f];
        let sp = pose.scale() * pose.rotation().fixed_rows::<2>(0);
        for (i, p) in fd.obs.points.iter().enumerate() {
            let sw = fd.weights[i].sqrt();
            let k = p.index;
            let mean = Vector3::new(basis.mean_shape[3 * k], basis.mean_shape[3 * k + 1], basis.mean_shape[3 * k + 2]);
            let aid = basis.axes_id.rows(3 * k, 3);
            let aexp = basis.axes_exp.rows(3 * k, 3);
            let bi = sp * aid;
            let ci = sp * aexp;
            let di = p.position - pose.translation() - sp * mean;
            b.rows_mut(2 * i, 2).copy_from(&(bi * sw));
            c.rows_mut(2 * i, 2).copy_from(&(ci * sw));
            d[2 * i] = di.x * sw;
            d[2 * i + 1] = di.y * sw;
        }
        let ctc = c.transpose() * &c + &w_exp;
        let k_chol = ctc
            .cholesky()
            .ok_or_else(|| Error::Numerical("expression normal matrix not positive definite".into()))?;
        let ctb = c.transpose() * &b;
        let ctd = c.transpose() * &d;
        let k_ctb = k_chol.solve(&ctb);
        let k_ctd = k_chol.solve(&ctd);
        reduced += b.transpose() * &b - ctb.transpose() * &k_ctb;
        rhs += b.transpose() * &d - ctb.transpose() * &k_ctd;
        per_frame.push((k_ctb, k_ctd));
    }
    let x_id = reduced
        .cholesky()
        .ok_or_else(|| Error::Numerical("identity normal matrix not positive definite".into()))?
        .solve(&rhs);
    let x_exp = per_frame
        .into_iter()
        .map(|(k_ctb, k_ctd)| k_ctd - k_ctb * &x_id)
        .collect();
    Ok((x_id, x_exp))
}

/// One damped Gauss–Newton step on all unknowns jointly (identity,
/// expressions, poses). Returns the new state if the objective decreased.
#[allow(clippy::too_many_arguments)]
fn joint_step(
    basis: &FaceBasis,
    frames: &[FrameData<'_>],
    x_id: &DVector<f64>,
    x_exp: &[DVector<f64>],
    poses: &[Pose],
    w_r: f64,
    energy: f64,
    lambda: &mut f64,
) -> Option<(DVector<f64>, Vec<DVector<f64>>, Vec<Pose>, f64)> {
    let (d_id, d_exp) = (basis.dim_id(), basis.dim_exp());
    let nf = frames.len();
    let per = d_exp + 6;
    let np = d_id + nf * per;
    let mut jtj = DMatrix::<f64>::zeros(np, np);
    let mut jtr = DVector::<f64>::zeros(np);
    let sw_r = w_r.sqrt();
    for (k, s) in basis.sigma_id.iter().enumerate() {
        let j = sw_r / s;
        jtj[(k, k)] += j * j;
        jtr[k] += j * j * x_id[k];
    }
    for (f, fd) in frames.iter().enumerate() {
        let off = d_id + f * per;
        for (k, s) in basis.sigma_exp.iter().enumerate() {
            let j = sw_r / s;
            jtj[(off + k, off + k)] += j * j;
            jtr[off + k] += j * j * x_exp[f][k];
        }
        let pose = &poses[f];
        let (r, s, t) = (*pose.rotation(), pose.scale(), pose.translation());
        let sp = s * r.fixed_rows::<2>(0);
        let idx: Vec<usize> = fd.obs.points.iter().map(|p| p.index).collect();
        let pts = landmark_positions(basis, x_id, &x_exp[f], &idx);
        // columns: [x_id | x_exp_f | δθ(3) t(2) log s]
        let mut jrow = DMatrix::<f64>::zeros(2, d_id + per);
        let mut cols: Vec<usize> = (0..d_id).collect();
        cols.extend(off..off + per);
        for (i, p) in fd.obs.points.iter().enumerate() {
            let w = fd.weights[i];
            let k = p.index;
            let rv = r * pts[i];
            let res = s * Vector2::new(rv.x, rv.y) + t - p.position;
            jrow.columns_mut(0, d_id).copy_from(&(sp * basis.axes_id.rows(3 * k, 3)));
            jrow.columns_mut(d_id, d_exp).copy_from(&(sp * basis.axes_exp.rows(3 * k, 3)));
            let c = d_id + d_exp;
            jrow[(0, c)] = 0.0;
            jrow[(0, c + 1)] = s * rv.z;
            jrow[(0, c + 2)] = -s * rv.y;
            jrow[(1, c)] = -s * rv.z;
            jrow[(1, c + 1)] = 0.0;
            jrow[(1, c + 2)] = s * rv.x;
            jrow[(0, c + 3)] = 1.0;
            jrow[(1, c + 3)] = 0.0;
            jrow[(0, c + 4)] = 0.0;
            jrow[(1, c + 4)] = 1.0;
            jrow[(0, c + 5)] = s * rv.x;
            jrow[(1, c + 5)] = s * rv.y;
            let local = jrow.transpose() * &jrow * w;
            let local_r = jrow.transpose() * res * w;
            for (a, &ca) in cols.iter().enumerate() {
                jtr[ca] += local_r[a];
                for (b, &cb) in cols.iter().enumerate() {
                    jtj[(ca, cb)] += local[(a, b)];
                }
            }
        }
    }
    for _ in 0..12 {
        let mut a = jtj.clone();
        for k in 0..np {
            a[(k, k)] += *lambda * (jtj[(k, k)] + 1e-12);
        }
        let Some(chol) = a.cholesky() else {
            *lambda *= 10.0;
            continue;
        };
        let delta = chol.solve(&(-&jtr));
        let new_id = x_id + delta.rows(0, d_id);
        let mut new_exp = Vec::with_capacity(nf);
        let mut new_poses = Vec::with_capacity(nf);
        let mut ok = true;
        for f in 0..nf {
            let off = d_id + f * per;
            new_exp.push(&x_exp[f] + delta.rows(off, d_exp));
            let dp = delta.rows(off + d_exp, 6);
            let rot = nalgebra::Rotation3::new(Vector3::new(dp[0], dp[1], dp[2])).into_inner() * poses[f].rotation();
            match Pose::new(
                nearest_rotation(&rot),
                poses[f].translation() + Vector2::new(dp[3], dp[4]),
                poses[f].scale() * dp[5].exp(),
            ) {
                Ok(p) => new_poses.push(p),
                Err(_) => {
                    ok = false;
                    break;
                }
            }
        }
        if ok {
            let e = objective(basis, frames, &new_id, &new_exp, &new_poses, w_r);
            if e < energy {
                *lambda = (*lambda / 3.0).max(1e-12);
                return Some((new_id, new_exp, new_poses, e));
            }
        }
        *lambda *= 10.0;
    }
    None
}

const ANNEAL_START: f64 = 1e3;
const ANNEAL_FACTOR: f64 = 0.3;
const ANNEAL_ROUNDS: usize = 5;

/// Cold-start initialisation: alternates pose refinement and the exact
/// coefficient solve while the prior weight decays geometrically towards
/// `w_r`.
fn anneal(
    basis: &FaceBasis,
    frames: &[FrameData<'_>],
    x_id: &mut DVector<f64>,
    x_exp: &mut Vec<DVector<f64>>,
    poses: &mut [Pose],
    w_r: f64,
) -> Result<()> {
    let mut w = ANNEAL_START;
    while w > w_r {
        for _ in 0..ANNEAL_ROUNDS {
            refine_poses(basis, frames, x_id, x_exp, poses);
            let (id, exp) = solve_coefficients(basis, frames, poses, w)?;
            *x_id = id;
            *x_exp = exp;
        }
        w *= ANNEAL_FACTOR;
    }
    Ok(())
}

fn refine_poses(basis: &FaceBasis, frames: &[FrameData<'_>], x_id: &DVector<f64>, x_exp: &[DVector<f64>], poses: &mut [Pose]) {
    for (f, fd) in frames.iter().enumerate() {
        let idx: Vec<usize> = fd.obs.points.iter().map(|p| p.index).collect();
        let pts = landmark_positions(basis, x_id, &x_exp[f], &idx);
        poses[f] = refine_pose(&poses[f], &pts, &fd.targets, Some(&fd.weights), 10).0;
    }
}

/// Fits one shared identity and per-frame expressions and poses to landmark
/// observations. A cold start is first annealed from a strong prior down to
/// the configured one. Each outer iteration then refines the poses, solves exactly for
/// the coefficients, then takes one damped joint Gauss–Newton step over
/// everything. The objective never increases; when the iteration
/// budget runs out the best iterate is returned with `converged = false`.
pub fn fit_identity_expression(obs: &LandmarkObservations, basis: &FaceBasis, config: &FitConfig) -> Result<FitResult> {
    fit_identity_expression_from(obs, basis, config, None)
}

/// As [`fit_identity_expression`], optionally warm-started from a previous
/// result with the same frame count.
pub fn fit_identity_expression_from(
    obs: &LandmarkObservations,
    basis: &FaceBasis,
    config: &FitConfig,
    init: Option<&FitResult>,
) -> Result<FitResult> {
    config.validate()?;
    obs.validate(basis)?;
    let frames: Vec<FrameData<'_>> = obs
        .frames
        .iter()
        .map(|f| FrameData {
            obs: f,
            weights: f.points.iter().map(|p| p.weight).collect(),
            targets: f.points.iter().map(|p| p.position).collect(),
        })
        .collect();
    let n = frames.len();
    let (mut x_id, mut x_exp, mut poses) = match init {
        Some(r) => {
            crate::error::check_len("initial frames", n, r.poses.len())?;
            (r.x_id.clone(), r.x_exp.clone(), r.poses.clone())
        }
        None => {
            let x_id = DVector::zeros(basis.dim_id());
            let x_exp = vec![DVector::zeros(basis.dim_exp()); n];
            let poses = frames
                .iter()
                .map(|fd| {
                    let idx: Vec<usize> = fd.obs.points.iter().map(|p| p.index).collect();
                    let pts = landmark_positions(basis, &x_id, &x_exp[0], &idx);
                    fit_pose_weighted(&pts, &fd.targets, Some(&fd.weights))
                })
                .collect::<Result<Vec<_>>>()?;
            (x_id, x_exp, poses)
        }
    };
    let w_r = config.reg_weight;
    if init.is_none() {
        anneal(basis, &frames, &mut x_id, &mut x_exp, &mut poses, w_r)?;
    }
    let mut energy = objective(basis, &frames, &x_id, &x_exp, &poses, w_r);
    let mut history = vec![energy];
    let mut converged = false;
    let mut iterations = 0;
    let mut lambda = config.damping;
    for _ in 0..config.max_iterations {
        iterations += 1;
        let prev = energy;
        refine_poses(basis, &frames, &x_id, &x_exp, &mut poses);
        let (cand_id, cand_exp) = solve_coefficients(basis, &frames, &poses, w_r)?;
        let cand = objective(basis, &frames, &cand_id, &cand_exp, &poses, w_r);
        let after_pose = objective(basis, &frames, &x_id, &x_exp, &poses, w_r);
        // the linear step is an exact minimiser; guard against rounding
        if cand <= after_pose {
            x_id = cand_id;
            x_exp = cand_exp;
            energy = cand;
        } else {
            energy = after_pose;
        }
        if let Some((id, exp, ps, e)) =
            joint_step(basis, &frames, &x_id, &x_exp, &poses, w_r, energy, &mut lambda)
        {
            x_id = id;
            x_exp = exp;
            poses = ps;
            energy = e;
        }
        assert!(
            energy <= prev * (1.0 + 1e-12) + 1e-300,
            "fit objective increased: {prev} -> {energy}"
        );
        if !energy.is_finite() {
            return Err(Error::Numerical("fit objective is not finite".into()));
        }
        history.push(energy);
        if prev - energy <= config.tolerance * (1.0 + prev) {
            converged = true;
            break;
        }
    }
    Ok(FitResult {
        x_id,
        x_exp,
        poses,
        frame_ids: obs.frames.iter().map(|f| f.frame).collect(),
        objective_history: history,
        converged,
        iterations,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FittedFrame {
    pub frame: usize,
    pub x_exp: Vec<f64>,
    pub pose: Vec<f64>,
}

/// Params JSON written by the fitting CLI.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitOutput {
    pub x_id: Vec<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub x_alb: Option<Vec<f64>>,
    pub frames: Vec<FittedFrame>,
    pub converged: bool,
    pub iterations: usize,
    pub objective_history: Vec<f64>,
}

impl FitOutput {
    pub fn from_result(r: &FitResult, x_alb: Option<Vec<f64>>) -> Self {
        Self {
            x_id: r.x_id.iter().copied().collect(),
            x_alb,
            frames: r
                .frame_ids
                .iter()
                .enumerate()
                .map(|(f, &id)| FittedFrame {
                    frame: id,
                    x_exp: r.x_exp[f].iter().copied().collect(),
                    pose: r.poses[f].to_array().to_vec(),
                })
                .collect(),
            converged: r.converged,
            iterations: r.iterations,
            objective_history: r.objective_history.clone(),
        }
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::json(path, e))?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::json(path, e))
    }
}
