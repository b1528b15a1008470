//! Linear morphable face model, rigid weak-perspective pose, visibility and
//! landmark extraction.

mod basis;
mod io;
mod pose;
mod visibility;

pub use basis::{FaceBasis, FaceParams, LandmarkSet, Mesh, Triangle};
pub use io::{read_basis, read_provenance, sidecar_path, write_basis, BasisProvenance};
pub use pose::{project, Pose};
pub use visibility::{visible_vertices, DEPTH_TOLERANCE};

use nalgebra::Vector2;

use crate::error::Result;

/// Projected positions of the selected landmark vertices, in index order.
pub fn landmarks_2d(
    basis: &FaceBasis,
    params: &FaceParams,
    pose: &Pose,
    which: LandmarkSet,
) -> Result<Vec<Vector2<f64>>> {
    let mesh = basis.evaluate_shape(params)?;
    Ok(basis
        .landmarks(which)
        .iter()
        .map(|&i| pose.project(&mesh.vertex(i)))
        .collect())
}
