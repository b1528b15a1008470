use std::f64::consts::PI;

use nalgebra::{Matrix2, Matrix3, SymmetricEigen, Vector2, Vector3};

use crate::dataset::EllipseRecord;
use crate::error::{Error, Result};

/// Geometric ellipse: `orientation` is the major-axis angle from +x toward
/// +y (image down), in `[0, π)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EllipseFit {
    pub centre: Vector2<f64>,
    pub semi_major: f64,
    pub semi_minor: f64,
    pub orientation: f64,
}

impl EllipseFit {
    pub fn new(centre: Vector2<f64>, semi_major: f64, semi_minor: f64, orientation: f64) -> Result<Self> {
        if !(semi_minor > 0.0 && semi_major >= semi_minor && semi_major.is_finite())
            || !centre.iter().all(|v| v.is_finite())
            || !orientation.is_finite()
        {
            return Err(Error::EllipseFit(format!(
                "invalid ellipse: a = {semi_major}, b = {semi_minor}, centre = ({}, {})",
                centre.x, centre.y
            )));
        }
        Ok(Self {
            centre,
            semi_major,
            semi_minor,
            orientation: wrap_pi(orientation),
        })
    }

    pub fn axis_ratio(&self) -> f64 {
        self.semi_minor / self.semi_major
    }

    pub fn major_axis(&self) -> Vector2<f64> {
        Vector2::new(self.orientation.cos(), self.orientation.sin())
    }

    pub fn minor_axis(&self) -> Vector2<f64> {
        Vector2::new(-self.orientation.sin(), self.orientation.cos())
    }

    /// `(u/a)² + (w/b)²` in the ellipse frame; ≤ 1 inside.
    pub fn level(&self, p: Vector2<f64>) -> f64 {
        let d = p - self.centre;
        let u = d.dot(&self.major_axis()) / self.semi_major;
        let w = d.dot(&self.minor_axis()) / self.semi_minor;
        u * u + w * w
    }

    pub fn contains(&self, p: Vector2<f64>) -> bool {
        self.level(p) <= 1.0
    }

    pub fn point_at(&self, t: f64) -> Vector2<f64> {
        self.centre + self.major_axis() * (self.semi_major * t.cos()) + self.minor_axis() * (self.semi_minor * t.sin())
    }

    pub fn area(&self) -> f64 {
        PI * self.semi_major * self.semi_minor
    }

    pub fn to_record(&self) -> EllipseRecord {
        EllipseRecord {
            centre: [self.centre.x, self.centre.y],
            semi_major: self.semi_major,
            semi_minor: self.semi_minor,
            orientation: self.orientation,
        }
    }

    pub fn from_record(r: &EllipseRecord) -> Result<Self> {
        Self::new(Vector2::from(r.centre), r.semi_major, r.semi_minor, r.orientation)
    }
}

pub(crate) fn wrap_pi(angle: f64) -> f64 {
    let w = angle.rem_euclid(PI);
    if w >= PI { 0.0 } else { w }
}

/// Direct least-squares ellipse fit with the `4AC − B² = 1` constraint,
/// solved in the numerically stable reduced form on mean-centred,
/// RMS-scaled coordinates.
pub fn fit_ellipse(points: &[Vector2<f64>]) -> Result<EllipseFit> {
    if points.len() < 6 {
        return Err(Error::EllipseFit(format!(
            "insufficient points: need at least 6, got {}",
            points.len()
        )));
    }
    if points.iter().any(|p| !p.x.is_finite() || !p.y.is_finite()) {
        return Err(Error::EllipseFit("non-finite point".into()));
    }
    let n = points.len() as f64;
    let mean = points.iter().sum::<Vector2<f64>>() / n;
    let scale = (points.iter().map(|p| (p - mean).norm_squared()).sum::<f64>() / n).sqrt();
    if !(scale > 0.0) {
        return Err(Error::EllipseFit("all points coincide".into()));
    }

    let mut s1 = Matrix3::<f64>::zeros();
    let mut s2 = Matrix3::<f64>::zeros();
    let mut s3 = Matrix3::<f64>::zeros();
    for p in points {
        let q = (p - mean) / scale;
        let d1 = Vector3::new(q.x * q.x, q.x * q.y, q.y * q.y);
        let d2 = Vector3::new(q.x, q.y, 1.0);
        s1 += d1 * d1.transpose();
        s2 += d1 * d2.transpose();
        s3 += d2 * d2.transpose();
    }
    let s3_inv = s3
        .try_inverse()
        .ok_or_else(|| Error::EllipseFit("points are collinear".into()))?;
    let t = -s3_inv * s2.transpose();
    let m = s1 + s2 * t;
    // C1⁻¹·M with C1 = [[0,0,2],[0,-1,0],[2,0,0]]
    let reduced = Matrix3::from_rows(&[
        (m.row(2) / 2.0).into_owned(),
        (-m.row(1)).into_owned(),
        (m.row(0) / 2.0).into_owned(),
    ]);

    let mut best: Option<(f64, Vector3<f64>)> = None;
    for lambda in real_eigenvalues(&reduced) {
        let Some(v) = null_vector(&(reduced - Matrix3::identity() * lambda)) else {
            continue;
        };
        let cond = 4.0 * v[0] * v[2] - v[1] * v[1];
        if cond > 0.0 && best.is_none_or(|(c, _)| cond > c) {
            best = Some((cond, v));
        }
    }
    let (_, a1) = best.ok_or_else(|| Error::EllipseFit("no elliptic solution (hyperbolic or degenerate)".into()))?;
    let a2 = t * a1;
    let conic = [a1[0], a1[1], a1[2], a2[0], a2[1], a2[2]];
    let unit = conic_to_ellipse(&conic)?;
    EllipseFit::new(
        unit.centre * scale + mean,
        unit.semi_major * scale,
        unit.semi_minor * scale,
        unit.orientation,
    )
}

/// Geometric parameters of `A x² + B xy + C y² + D x + E y + F = 0`.
pub(crate) fn conic_to_ellipse(c: &[f64; 6]) -> Result<EllipseFit> {
    let [a, b, cc, d, e, f] = *c;
    let det = 4.0 * a * cc - b * b;
    if !(det > 0.0) {
        return Err(Error::EllipseFit(format!("conic is not an ellipse (4AC − B² = {det:e})")));
    }
    let x0 = (b * e - 2.0 * cc * d) / det;
    let y0 = (b * d - 2.0 * a * e) / det;
    let f0 = f + (d * x0 + e * y0) / 2.0;
    let q = Matrix2::new(a, b / 2.0, b / 2.0, cc);
    let eig = SymmetricEigen::new(q);
    let (i_small, i_large) = if eig.eigenvalues[0].abs() <= eig.eigenvalues[1].abs() {
        (0, 1)
    } else {
        (1, 0)
    };
    let semi_major_sq = -f0 / eig.eigenvalues[i_small];
    let semi_minor_sq = -f0 / eig.eigenvalues[i_large];
    if !(semi_major_sq > 0.0 && semi_minor_sq > 0.0) {
        return Err(Error::EllipseFit("imaginary ellipse".into()));
    }
    let axis = eig.eigenvectors.column(i_small);
    EllipseFit::new(
        Vector2::new(x0, y0),
        semi_major_sq.sqrt(),
        semi_minor_sq.sqrt().min(semi_major_sq.sqrt()),
        axis[1].atan2(axis[0]),
    )
}

fn real_eigenvalues(m: &Matrix3<f64>) -> Vec<f64> {
    // characteristic polynomial λ³ + p λ² + q λ + r
    let tr = m.trace();
    let minors = m[(0, 0)] * m[(1, 1)] - m[(0, 1)] * m[(1, 0)] + m[(0, 0)] * m[(2, 2)] - m[(0, 2)] * m[(2, 0)]
        + m[(1, 1)] * m[(2, 2)] - m[(1, 2)] * m[(2, 1)];
    let det = m.determinant();
    let mut roots = cubic_roots(-tr, minors, -det);
    // polish against the matrix itself
    for r in &mut roots {
        for _ in 0..3 {
            let f = ((*r - tr) * *r + minors) * *r - det;
            let df = (3.0 * *r - 2.0 * tr) * *r + minors;
            if df.abs() > 0.0 {
                *r -= f / df;
            }
        }
    }
    roots
}

/// Real roots of `x³ + p x² + q x + r`.
fn cubic_roots(p: f64, q: f64, r: f64) -> Vec<f64> {
    let shift = p / 3.0;
    let a = q - p * p / 3.0;
    let b = 2.0 * p * p * p / 27.0 - p * q / 3.0 + r;
    let disc = b * b / 4.0 + a * a * a / 27.0;
    if disc > 0.0 {
        let s = disc.sqrt();
        vec![(-b / 2.0 + s).cbrt() + (-b / 2.0 - s).cbrt() - shift]
    } else if a == 0.0 {
        vec![-shift]
    } else {
        let m = 2.0 * (-a / 3.0).sqrt();
        let arg = (3.0 * b / (a * m)).clamp(-1.0, 1.0);
        let theta = arg.acos() / 3.0;
        (0..3)
            .map(|k| m * (theta - 2.0 * PI * k as f64 / 3.0).cos() - shift)
            .collect()
    }
}

/// Unit vector spanning the (numerical) null space of a rank-2 matrix.
fn null_vector(m: &Matrix3<f64>) -> Option<Vector3<f64>> {
    let rows = [m.row(0).transpose(), m.row(1).transpose(), m.row(2).transpose()];
    let candidates = [rows[0].cross(&rows[1]), rows[0].cross(&rows[2]), rows[1].cross(&rows[2])];
    let best = candidates
        .iter()
        .max_by(|a, b| a.norm_squared().total_cmp(&b.norm_squared()))?;
    let n = best.norm();
    (n > 0.0).then(|| best / n)
}
