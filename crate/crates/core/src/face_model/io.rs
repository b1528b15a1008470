//! `FEB1` basis files.
//!
//! Layout (little-endian): magic `FEB1`; seven `u32` header fields
//! `N, D_id, D_exp, D_alb, triangle count, lower landmark count, mouth
//! landmark count`; then `f64` payloads in order: mean shape (3N), mean
//! albedo (3N), identity axes, expression axes, albedo axes (each 3N×D,
//! column-major), identity/expression/albedo sigmas; then `u32` payloads:
//! triangles (3 per triangle), lower landmarks, mouth landmarks.
//!
//! Provenance lives in a JSON sidecar at `<path>.json`.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::FaceBasis;
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"FEB1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BasisProvenance {
    pub format: String,
    pub seed: u64,
    pub preset: String,
    pub n_vertices: usize,
    pub dim_id: usize,
    pub dim_exp: usize,
    pub dim_alb: usize,
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

pub fn write_basis(path: &Path, basis: &FaceBasis, seed: u64, preset: &str) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    for v in [
        basis.n_vertices(),
        basis.dim_id(),
        basis.dim_exp(),
        basis.dim_alb(),
        basis.triangles.len(),
        basis.landmarks_lower.len(),
        basis.landmarks_mouth.len(),
    ] {
        buf.extend_from_slice(&(v as u32).to_le_bytes());
    }
    let reals = basis
        .mean_shape
        .iter()
        .chain(basis.mean_albedo.iter())
        .chain(basis.axes_id.iter())
        .chain(basis.axes_exp.iter())
        .chain(basis.axes_alb.iter())
        .chain(&basis.sigma_id)
        .chain(&basis.sigma_exp)
        .chain(&basis.sigma_alb);
    for v in reals {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    for t in basis.triangles.iter() {
        for i in t {
            buf.extend_from_slice(&i.to_le_bytes());
        }
    }
    for &i in basis.landmarks_lower.iter().chain(&basis.landmarks_mouth) {
        buf.extend_from_slice(&(i as u32).to_le_bytes());
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))?;

    let prov = BasisProvenance {
        format: "FEB1".into(),
        seed,
        preset: preset.into(),
        n_vertices: basis.n_vertices(),
        dim_id: basis.dim_id(),
        dim_exp: basis.dim_exp(),
        dim_alb: basis.dim_alb(),
    };
    let side = sidecar_path(path);
    let json = serde_json::to_string_pretty(&prov).map_err(|e| Error::json(&side, e))?;
    fs::write(&side, json).map_err(|e| Error::io(&side, e))
}

pub fn read_basis(path: &Path) -> Result<FaceBasis> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut r = Reader { bytes: &bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::format("FEB1", "bad magic"));
    }
    let mut hdr = [0usize; 7];
    for h in &mut hdr {
        *h = r.u32()? as usize;
    }
    let [n, d_id, d_exp, d_alb, n_tri, n_low, n_mouth] = hdr;
    let n3 = 3 * n;
    let mean_shape = DVector::from_vec(r.reals(n3)?);
    let mean_albedo = DVector::from_vec(r.reals(n3)?);
    let axes_id = DMatrix::from_vec(n3, d_id, r.reals(n3 * d_id)?);
    let axes_exp = DMatrix::from_vec(n3, d_exp, r.reals(n3 * d_exp)?);
    let axes_alb = DMatrix::from_vec(n3, d_alb, r.reals(n3 * d_alb)?);
    let sigma_id = r.reals(d_id)?;
    let sigma_exp = r.reals(d_exp)?;
    let sigma_alb = r.reals(d_alb)?;
    let mut triangles = Vec::with_capacity(n_tri);
    for _ in 0..n_tri {
        triangles.push([r.u32()?, r.u32()?, r.u32()?]);
    }
    let landmarks_lower = (0..n_low).map(|_| r.u32().map(|v| v as usize)).collect::<Result<_>>()?;
    let landmarks_mouth = (0..n_mouth).map(|_| r.u32().map(|v| v as usize)).collect::<Result<_>>()?;
    if r.pos != bytes.len() {
        return Err(Error::format("FEB1", "trailing bytes"));
    }
    let basis = FaceBasis {
        mean_shape,
        mean_albedo,
        axes_id,
        axes_exp,
        axes_alb,
        sigma_id,
        sigma_exp,
        sigma_alb,
        triangles: Arc::from(triangles),
        landmarks_lower,
        landmarks_mouth,
    };
    basis.validate()?;
    Ok(basis)
}

pub fn read_provenance(path: &Path) -> Result<BasisProvenance> {
    let side = sidecar_path(path);
    let text = fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
    serde_json::from_str(&text).map_err(|e| Error::json(&side, e))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        let out = self
            .bytes
            .get(self.pos..self.pos + n)
            .ok_or_else(|| Error::format("FEB1", "truncated file"))?;
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn reals(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(n * 8)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }
}
