//! Seeded synthetic stand-in for a licensed morphable model: a smooth
//! half-ellipsoid face on a regular grid, with a split mouth line so the lips
//! can part, and orthonormal identity/expression/albedo axes.

use std::f64::consts::PI;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::face_model::{FaceBasis, Triangle};
use crate::seed;

/// Vertical extent of the face grid (object units, +y points down).
const Y_TOP: f64 = -1.25;
const Y_BOTTOM: f64 = 1.25;
/// Vertical semi-axis of the face outline.
const FACE_RY: f64 = 1.3;
/// Level of the mouth line.
pub const Y_MOUTH: f64 = 0.62;
const MOUTH_HALF_WIDTH: f64 = 0.38;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticBasisSpec {
    pub seed: u64,
    /// Vertex budget; the grid uses the largest near-square `rows × cols ≤ N`.
    pub n_vertices: usize,
    pub dim_id: usize,
    pub dim_exp: usize,
    pub dim_alb: usize,
    /// Per-axis scale decay, `sigma_k = decay^k`.
    pub decay: f64,
}

impl SyntheticBasisSpec {
    pub fn desk(seed: u64) -> Self {
        Self {
            seed,
            n_vertices: 2000,
            dim_id: 20,
            dim_exp: 12,
            dim_alb: 20,
            decay: 0.85,
        }
    }

    pub fn paper(seed: u64) -> Self {
        Self {
            seed,
            n_vertices: 4900,
            dim_id: 100,
            dim_exp: 79,
            dim_alb: 100,
            decay: 0.97,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_vertices < 100 {
            return Err(Error::InvalidInput(format!(
                "vertex budget {} below the minimum of 100",
                self.n_vertices
            )));
        }
        if self.dim_id == 0 || self.dim_exp == 0 || self.dim_alb == 0 {
            return Err(Error::InvalidInput("basis dimensions must be ≥ 1".into()));
        }
        if !(self.decay > 0.0 && self.decay < 1.0) {
            return Err(Error::InvalidInput(format!("decay {} not in (0, 1)", self.decay)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Side {
    Upper,
    Lower,
}

/// Grid bookkeeping shared by geometry, albedo and deformation fields.
struct Layout {
    rows: usize,
    cols: usize,
    /// Vertex row holding the upper lip edge; row `mouth_row + 1` duplicates
    /// it as the lower lip edge.
    mouth_row: usize,
    levels: Vec<f64>,
}

impl Layout {
    fn new(budget: usize) -> Self {
        let cols = (budget as f64).sqrt().floor() as usize;
        let rows = budget / cols;
        let n_levels = rows - 1;
        let levels: Vec<f64> = (0..n_levels)
            .map(|j| Y_TOP + (Y_BOTTOM - Y_TOP) * j as f64 / (n_levels - 1) as f64)
            .collect();
        let m = ((Y_MOUTH - Y_TOP) / (Y_BOTTOM - Y_TOP) * (n_levels - 1) as f64).round() as usize;
        Self {
            rows,
            cols,
            mouth_row: m.clamp(1, n_levels - 2),
            levels,
        }
    }

    fn n_vertices(&self) -> usize {
        self.rows * self.cols
    }

    fn level_of_row(&self, r: usize) -> usize {
        if r <= self.mouth_row {
            r
        } else {
            r - 1
        }
    }

    fn side(&self, r: usize) -> Side {
        if r <= self.mouth_row {
            Side::Upper
        } else {
            Side::Lower
        }
    }

    fn mouth_level(&self) -> f64 {
        self.levels[self.mouth_row]
    }

    fn vertex_xy(&self, r: usize, c: usize) -> (f64, f64) {
        let y = self.levels[self.level_of_row(r)];
        let u = -1.0 + 2.0 * c as f64 / (self.cols - 1) as f64;
        (u * half_width(y), y)
    }

    fn triangles(&self) -> Vec<Triangle> {
        let idx = |r: usize, c: usize| (r * self.cols + c) as u32;
        let mut tris = Vec::with_capacity(2 * (self.rows - 1) * (self.cols - 1));
        for r in 0..self.rows - 1 {
            for c in 0..self.cols - 1 {
                tris.push([idx(r, c), idx(r + 1, c), idx(r, c + 1)]);
                tris.push([idx(r, c + 1), idx(r + 1, c), idx(r + 1, c + 1)]);
            }
        }
        tris
    }
}

fn half_width(y: f64) -> f64 {
    (1.0 - (y / FACE_RY).powi(2)).max(0.0).sqrt()
}

fn gauss(v: f64, s: f64) -> f64 {
    (-(v / s).powi(2)).exp()
}

fn depth(x: f64, y: f64, ym: f64) -> f64 {
    let shell = 0.75 * (1.0 - x * x - (y / FACE_RY).powi(2)).max(0.0).sqrt();
    let nose = 0.28 * gauss(x, 0.12) * gauss(y + 0.05, 0.28);
    let lips = 0.05 * gauss(x, 0.3) * gauss(y - ym, 0.1);
    let chin = 0.06 * gauss(x, 0.3) * gauss(y - 1.0, 0.15);
    shell + nose + lips + chin
}

fn albedo(x: f64, y: f64, r: usize, layout: &Layout) -> [f64; 3] {
    let ym = layout.mouth_level();
    let m = layout.mouth_row;
    let mouth_edge = r == m || r == m + 1;
    let lip_row = r + 1 == m || r == m + 2;
    if mouth_edge && x.abs() < MOUTH_HALF_WIDTH - 0.04 {
        return [0.10, 0.04, 0.04];
    }
    if (mouth_edge || lip_row) && x.abs() < MOUTH_HALF_WIDTH {
        return [0.62, 0.28, 0.28];
    }
    let brow = gauss(y + 0.55, 0.06) * gauss(x.abs() - 0.45, 0.22);
    let nostril = gauss(x.abs() - 0.08, 0.035) * gauss(y - 0.2, 0.03);
    let dark = (brow + nostril).min(1.0) * 0.7;
    let blush = 0.05 * gauss(x.abs() - 0.55, 0.2) * gauss(y - ym + 0.2, 0.2);
    [
        (0.82 - dark + blush).clamp(0.0, 1.0),
        (0.64 - dark).clamp(0.0, 1.0),
        (0.54 - dark).clamp(0.0, 1.0),
    ]
}

/// Hand-shaped mouth deformations; any further expression axes are random
/// smooth fields under a mouth window.
fn expression_prototype(k: usize, x: f64, y: f64, side: Side, ym: f64) -> Option<[f64; 3]> {
    let mw = (1.0 - (x / MOUTH_HALF_WIDTH).powi(2)).max(0.0);
    let near = gauss(y - ym, 0.25);
    let lower = side == Side::Lower;
    let corner = gauss(x.abs() - 0.35, 0.18) * near;
    let v = match k {
        // jaw open
        0 => {
            if lower {
                let j = gauss(x, 0.75);
                [0.0, j, -0.2 * j]
            } else {
                [0.0, 0.0, 0.0]
            }
        }
        // lips part
        1 => {
            let d = mw * near;
            [0.0, if lower { d } else { -d }, 0.0]
        }
        // smile
        2 => [x.signum() * corner, -0.8 * corner, 0.0],
        // horizontal stretch
        3 => [x * near * gauss(x, 0.6), 0.0, 0.0],
        // pucker
        4 => [-x * mw * near, 0.0, 0.5 * mw * near],
        // one-sided smile
        5 => {
            let c = if x < 0.0 { corner } else { 0.0 };
            [-c, -0.8 * c, 0.0]
        }
        // upper lip raise
        6 => [0.0, if lower { 0.0 } else { -mw * near }, 0.0],
        // jaw slide
        7 => [if lower { gauss(x, 0.75) } else { 0.0 }, 0.0, 0.0],
        // cheek puff
        8 => [0.0, 0.0, gauss(x.abs() - 0.55, 0.2) * gauss(y - ym + 0.1, 0.3)],
        _ => return None,
    };
    Some(v)
}

struct SmoothField {
    coeffs: Vec<[f64; 3]>,
    order: usize,
}

impl SmoothField {
    fn random(order: usize, rng: &mut ChaCha8Rng) -> Self {
        let coeffs = (0..order * order)
            .map(|i| {
                let (p, q) = (i / order, i % order);
                let damp = 1.0 / (1.0 + (p * p + q * q) as f64);
                [
                    rng.random_range(-1.0..1.0) * damp,
                    rng.random_range(-1.0..1.0) * damp,
                    rng.random_range(-1.0..1.0) * damp,
                ]
            })
            .collect();
        Self { coeffs, order }
    }

    fn eval(&self, x: f64, y: f64) -> [f64; 3] {
        let u = (x + 1.0) * 0.5;
        let v = (y / FACE_RY + 1.0) * 0.5;
        let mut out = [0.0; 3];
        for (i, c) in self.coeffs.iter().enumerate() {
            let (p, q) = (i / self.order, i % self.order);
            let b = (PI * p as f64 * u).cos() * (PI * q as f64 * v).cos();
            for d in 0..3 {
                out[d] += c[d] * b;
            }
        }
        out
    }
}

/// Modified Gram–Schmidt with one re-orthogonalisation pass.
fn orthonormalize(m: &mut DMatrix<f64>, rng: &mut ChaCha8Rng) {
    for k in 0..m.ncols() {
        for _attempt in 0..4 {
            for _pass in 0..2 {
                for j in 0..k {
                    let proj = m.column(j).dot(&m.column(k));
                    let cj = m.column(j).clone_owned();
                    m.column_mut(k).axpy(-proj, &cj, 1.0);
                }
            }
            let norm = m.column(k).norm();
            if norm > 1e-8 {
                m.column_mut(k).scale_mut(1.0 / norm);
                break;
            }
            for v in m.column_mut(k).iter_mut() {
                *v = rng.random_range(-1.0..1.0);
            }
        }
    }
}

/// Builds the synthetic basis; bit-identical for identical specs.
pub fn gen_basis(spec: &SyntheticBasisSpec) -> Result<FaceBasis> {
    spec.validate()?;
    let layout = Layout::new(spec.n_vertices);
    let n = layout.n_vertices();
    let n3 = 3 * n;
    for (what, d) in [("identity", spec.dim_id), ("expression", spec.dim_exp), ("albedo", spec.dim_alb)] {
        if d > n3 {
            return Err(Error::InvalidInput(format!(
                "{what} dimension {d} exceeds 3N = {n3}"
            )));
        }
    }
    let ym = layout.mouth_level();

    let mut shape = DVector::zeros(n3);
    let mut alb = DVector::zeros(n3);
    let mut xy = Vec::with_capacity(n);
    let mut sides = Vec::with_capacity(n);
    for r in 0..layout.rows {
        for c in 0..layout.cols {
            let i = r * layout.cols + c;
            let (x, y) = layout.vertex_xy(r, c);
            shape[3 * i] = x;
            shape[3 * i + 1] = y;
            shape[3 * i + 2] = depth(x, y, ym);
            let a = albedo(x, y, r, &layout);
            alb.as_mut_slice()[3 * i..3 * i + 3].copy_from_slice(&a);
            xy.push((x, y));
            sides.push(layout.side(r));
        }
    }

    let mut rng = seed::rng(spec.seed, &[seed::STREAM_BASIS]);

    let mut axes_id = DMatrix::zeros(n3, spec.dim_id);
    for k in 0..spec.dim_id {
        let f = SmoothField::random(4, &mut rng);
        for (i, &(x, y)) in xy.iter().enumerate() {
            let d = f.eval(x, y);
            for a in 0..3 {
                axes_id[(3 * i + a, k)] = d[a];
            }
        }
    }

    let mut axes_exp = DMatrix::zeros(n3, spec.dim_exp);
    for k in 0..spec.dim_exp {
        let random = (expression_prototype(k, 0.0, 0.0, Side::Upper, ym).is_none())
            .then(|| SmoothField::random(5, &mut rng));
        for (i, &(x, y)) in xy.iter().enumerate() {
            let d = match &random {
                None => expression_prototype(k, x, y, sides[i], ym).expect("prototype"),
                Some(f) => {
                    let w = gauss(x, 0.6) * gauss(y - ym, 0.4);
                    let v = f.eval(x, y);
                    let lip = if sides[i] == Side::Lower { 1.0 } else { -1.0 };
                    [w * v[0], w * (v[1] + 0.3 * lip * v[2]), w * v[2]]
                }
            };
            for a in 0..3 {
                axes_exp[(3 * i + a, k)] = d[a];
            }
        }
    }

    let mut axes_alb = DMatrix::zeros(n3, spec.dim_alb);
    for k in 0..spec.dim_alb {
        let f = SmoothField::random(4, &mut rng);
        for (i, &(x, y)) in xy.iter().enumerate() {
            let d = f.eval(x, y);
            for a in 0..3 {
                axes_alb[(3 * i + a, k)] = d[a];
            }
        }
    }

    orthonormalize(&mut axes_id, &mut rng);
    orthonormalize(&mut axes_exp, &mut rng);
    orthonormalize(&mut axes_alb, &mut rng);

    let sigmas = |d: usize| (0..d).map(|k| spec.decay.powi(k as i32)).collect::<Vec<_>>();
    let (landmarks_lower, landmarks_mouth) = pick_landmarks(&xy, &sides, ym);

    let basis = FaceBasis {
        mean_shape: shape,
        mean_albedo: alb,
        axes_id,
        axes_exp,
        axes_alb,
        sigma_id: sigmas(spec.dim_id),
        sigma_exp: sigmas(spec.dim_exp),
        sigma_alb: sigmas(spec.dim_alb),
        triangles: Arc::from(layout.triangles()),
        landmarks_lower,
        landmarks_mouth,
    };
    basis.validate()?;
    Ok(basis)
}

/// 29 lower-face landmarks (jaw, nose base, outer and inner lips, chin) snapped
/// to the nearest unused vertex; the 12 lip points form the mouth set.
fn pick_landmarks(xy: &[(f64, f64)], sides: &[Side], ym: f64) -> (Vec<usize>, Vec<usize>) {
    let mut targets: Vec<(f64, f64, Option<Side>, bool)> = Vec::with_capacity(29);
    for k in 0..9 {
        let phi = (15.0 + 150.0 * k as f64 / 8.0).to_radians();
        targets.push((0.9 * phi.cos(), FACE_RY * 0.9 * phi.sin(), None, false));
    }
    for k in 0..5 {
        targets.push((-0.2 + 0.1 * k as f64, 0.22, None, false));
    }
    for k in 0..8 {
        let th = (45.0 * k as f64).to_radians();
        let y = ym + 0.12 * th.sin();
        let side = if th.sin() > 1e-9 { Side::Lower } else { Side::Upper };
        targets.push((0.34 * th.cos(), y, Some(side), true));
    }
    for (x, side) in [(-0.12, Side::Upper), (0.12, Side::Upper), (-0.12, Side::Lower), (0.12, Side::Lower)] {
        targets.push((x, ym, Some(side), true));
    }
    for x in [-0.18, 0.0, 0.18] {
        targets.push((x, 1.05, None, false));
    }

    let mut used = vec![false; xy.len()];
    let mut lower = Vec::with_capacity(targets.len());
    let mut mouth = Vec::new();
    for (tx, ty, side, is_mouth) in targets {
        let pick = |respect_side: bool| {
            (0..xy.len())
                .filter(|&i| !used[i] && (!respect_side || side.is_none_or(|s| sides[i] == s)))
                .min_by(|&a, &b| {
                    let da = (xy[a].0 - tx).powi(2) + (xy[a].1 - ty).powi(2);
                    let db = (xy[b].0 - tx).powi(2) + (xy[b].1 - ty).powi(2);
                    da.total_cmp(&db)
                })
        };
        let best = pick(true).or_else(|| pick(false)).expect("at least 29 vertices");
        used[best] = true;
        lower.push(best);
        if is_mouth {
            mouth.push(best);
        }
    }
    (lower, mouth)
}
