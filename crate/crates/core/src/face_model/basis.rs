use std::sync::Arc;

use nalgebra::{DMatrix, DVector, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};

pub type Triangle = [u32; 3];

/// Which landmark index list to use.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LandmarkSet {
    /// The lower-face evaluation set (29 points in the standard generator).
    Lower,
    /// Mouth-region points used by the landmark loss.
    Mouth,
}

/// A PCA face model: mean shape/albedo plus identity, expression and albedo
/// axes. Vertex `i` occupies entries `3i..3i+3` of every 3N-long vector.
///
/// Invariants (checked by [`FaceBasis::validate`]): every axis matrix has
/// orthonormal columns, every sigma is positive, triangle indices are in
/// range and landmark lists carry no duplicates.
#[derive(Debug, Clone, PartialEq)]
pub struct FaceBasis {
    pub mean_shape: DVector<f64>,
    pub mean_albedo: DVector<f64>,
    pub axes_id: DMatrix<f64>,
    pub axes_exp: DMatrix<f64>,
    pub axes_alb: DMatrix<f64>,
    pub sigma_id: Vec<f64>,
    pub sigma_exp: Vec<f64>,
    pub sigma_alb: Vec<f64>,
    pub triangles: Arc<[Triangle]>,
    pub landmarks_lower: Vec<usize>,
    pub landmarks_mouth: Vec<usize>,
}

impl FaceBasis {
    pub fn n_vertices(&self) -> usize {
        self.mean_shape.len() / 3
    }

    pub fn dim_id(&self) -> usize {
        self.axes_id.ncols()
    }

    pub fn dim_exp(&self) -> usize {
        self.axes_exp.ncols()
    }

    pub fn dim_alb(&self) -> usize {
        self.axes_alb.ncols()
    }

    pub fn landmarks(&self, which: LandmarkSet) -> &[usize] {
        match which {
            LandmarkSet::Lower => &self.landmarks_lower,
            LandmarkSet::Mouth => &self.landmarks_mouth,
        }
    }

    pub fn zero_params(&self) -> FaceParams {
        FaceParams::zeros(self.dim_id(), self.dim_exp(), self.dim_alb())
    }

    pub fn validate(&self) -> Result<()> {
        let n3 = self.mean_shape.len();
        if n3 == 0 || !n3.is_multiple_of(3) {
            return Err(Error::InvalidInput(format!(
                "mean shape length {n3} is not a positive multiple of 3"
            )));
        }
        let n = n3 / 3;
        check_len("mean albedo", n3, self.mean_albedo.len())?;
        for (what, axes, sigma) in [
            ("identity axes", &self.axes_id, &self.sigma_id),
            ("expression axes", &self.axes_exp, &self.sigma_exp),
            ("albedo axes", &self.axes_alb, &self.sigma_alb),
        ] {
            check_len(what, n3, axes.nrows())?;
            check_len("sigma", axes.ncols(), sigma.len())?;
            if axes.ncols() == 0 {
                return Err(Error::InvalidInput(format!("{what} has no columns")));
            }
            if let Some(s) = sigma.iter().find(|s| !(**s > 0.0)) {
                return Err(Error::InvalidInput(format!("{what}: non-positive sigma {s}")));
            }
            let gram = axes.tr_mul(axes);
            let dev = (gram - DMatrix::identity(axes.ncols(), axes.ncols())).amax();
            if dev > 1e-10 {
                return Err(Error::InvalidInput(format!(
                    "{what} are not orthonormal (max Gram deviation {dev:e})"
                )));
            }
        }
        if let Some(t) = self.triangles.iter().find(|t| t.iter().any(|&i| i as usize >= n)) {
            return Err(Error::InvalidInput(format!("triangle {t:?} indexes past {n} vertices")));
        }
        for (what, list) in [("lower", &self.landmarks_lower), ("mouth", &self.landmarks_mouth)] {
            let mut sorted = list.clone();
            sorted.sort_unstable();
            sorted.dedup();
            if sorted.len() != list.len() {
                return Err(Error::InvalidInput(format!("duplicate {what} landmark index")));
            }
            if list.iter().any(|&i| i >= n) {
                return Err(Error::InvalidInput(format!("{what} landmark index out of range")));
            }
        }
        Ok(())
    }

    fn check_params(&self, params: &FaceParams) -> Result<()> {
        check_len("identity coefficients", self.dim_id(), params.x_id.len())?;
        check_len("expression coefficients", self.dim_exp(), params.x_exp.len())?;
        check_len("albedo coefficients", self.dim_alb(), params.x_alb.len())
    }

    /// `mean_shape + axes_id·x_id + axes_exp·x_exp`.
    pub fn evaluate_shape(&self, params: &FaceParams) -> Result<Mesh> {
        self.check_params(params)?;
        let mut v = self.mean_shape.clone();
        v.gemv(1.0, &self.axes_id, &params.x_id, 1.0);
        v.gemv(1.0, &self.axes_exp, &params.x_exp, 1.0);
        Ok(Mesh {
            vertices: v.data.into(),
            triangles: Arc::clone(&self.triangles),
        })
    }

    /// `mean_albedo + axes_alb·x_alb`, unclamped.
    pub fn evaluate_albedo(&self, params: &FaceParams) -> Result<Vec<f64>> {
        self.check_params(params)?;
        let mut c = self.mean_albedo.clone();
        c.gemv(1.0, &self.axes_alb, &params.x_alb, 1.0);
        Ok(c.data.into())
    }
}

/// Identity, expression and albedo coefficient vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct FaceParams {
    pub x_id: DVector<f64>,
    pub x_exp: DVector<f64>,
    pub x_alb: DVector<f64>,
}

impl FaceParams {
    pub fn zeros(d_id: usize, d_exp: usize, d_alb: usize) -> Self {
        Self {
            x_id: DVector::zeros(d_id),
            x_exp: DVector::zeros(d_exp),
            x_alb: DVector::zeros(d_alb),
        }
    }

    pub fn new(x_id: Vec<f64>, x_exp: Vec<f64>, x_alb: Vec<f64>) -> Result<Self> {
        if x_id.iter().chain(&x_exp).chain(&x_alb).any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("non-finite face coefficient".into()));
        }
        Ok(Self {
            x_id: DVector::from_vec(x_id),
            x_exp: DVector::from_vec(x_exp),
            x_alb: DVector::from_vec(x_alb),
        })
    }

    pub fn with_expression(&self, x_exp: &[f64]) -> Self {
        Self {
            x_id: self.x_id.clone(),
            x_exp: DVector::from_column_slice(x_exp),
            x_alb: self.x_alb.clone(),
        }
    }
}

/// Vertex positions over a shared triangle topology.
#[derive(Debug, Clone, PartialEq)]
pub struct Mesh {
    pub vertices: Vec<f64>,
    pub triangles: Arc<[Triangle]>,
}

impl Mesh {
    pub fn new(vertices: Vec<f64>, triangles: Arc<[Triangle]>) -> Result<Self> {
        if !vertices.len().is_multiple_of(3) {
            return Err(Error::InvalidInput("vertex buffer length not a multiple of 3".into()));
        }
        let n = vertices.len() / 3;
        if triangles.iter().any(|t| t.iter().any(|&i| i as usize >= n)) {
            return Err(Error::InvalidInput("triangle index out of range".into()));
        }
        Ok(Self {
            vertices,
            triangles,
        })
    }

    pub fn n_vertices(&self) -> usize {
        self.vertices.len() / 3
    }

    #[inline]
    pub fn vertex(&self, i: usize) -> Vector3<f64> {
        Vector3::new(
            self.vertices[3 * i],
            self.vertices[3 * i + 1],
            self.vertices[3 * i + 2],
        )
    }

    pub fn vertices_iter(&self) -> impl Iterator<Item = Vector3<f64>> + '_ {
        self.vertices
            .chunks_exact(3)
            .map(|c| Vector3::new(c[0], c[1], c[2]))
    }

    pub fn translated(&self, offset: Vector3<f64>) -> Self {
        let mut out = self.clone();
        for c in out.vertices.chunks_exact_mut(3) {
            c[0] += offset.x;
            c[1] += offset.y;
            c[2] += offset.z;
        }
        out
    }
}
