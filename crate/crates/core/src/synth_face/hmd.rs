use std::sync::Arc;

use nalgebra::Vector3;

use super::raster::for_each_covered_pixel;
use crate::face_model::{Mesh, Pose};
use crate::image::{GrayImage, RgbImage};

/// Headset stand-in: a closed bevelled box mounted over the upper face.
#[derive(Debug, Clone, PartialEq)]
pub struct HmdProxy {
    /// Shell geometry around its own origin.
    pub mesh: Mesh,
    /// Position of the shell origin in the face's object frame.
    pub mount_offset: Vector3<f64>,
    pub scale: f64,
}

impl Default for HmdProxy {
    fn default() -> Self {
        Self::bevelled_box(Vector3::new(1.15, 0.78, 0.5), 0.12, Vector3::new(0.0, -0.66, 0.8), 1.0)
    }
}

impl HmdProxy {
    /// Box with half-extents `half`, whose front (+z) face is inset by
    /// `bevel` on every side. 12 vertices, 20 triangles, watertight.
    pub fn bevelled_box(half: Vector3<f64>, bevel: f64, mount_offset: Vector3<f64>, scale: f64) -> Self {
        let (hx, hy, hz) = (half.x, half.y, half.z);
        let ring = |x: f64, y: f64, z: f64| [[-x, -y, z], [x, -y, z], [x, y, z], [-x, y, z]];
        let back = ring(hx, hy, -hz);
        let mid = ring(hx, hy, hz - bevel);
        let front = ring(hx - bevel, hy - bevel, hz);
        let vertices: Vec<f64> = back
            .iter()
            .chain(&mid)
            .chain(&front)
            .flat_map(|v| v.iter().copied())
            .collect();
        let mut tris: Vec<[u32; 3]> = vec![[0, 2, 1], [0, 3, 2], [8, 9, 10], [8, 10, 11]];
        for (lo, hi) in [(0u32, 4u32), (4, 8)] {
            for k in 0..4 {
                let k1 = (k + 1) % 4;
                tris.push([lo + k, lo + k1, hi + k1]);
                tris.push([lo + k, hi + k1, hi + k]);
            }
        }
        Self {
            mesh: Mesh::new(vertices, Arc::from(tris)).expect("valid box"),
            mount_offset,
            scale,
        }
    }

    /// Shell vertices expressed in the face's object frame.
    pub fn posed_mesh(&self) -> Mesh {
        let mut m = self.mesh.clone();
        for c in m.vertices.chunks_exact_mut(3) {
            c[0] = self.mount_offset.x + self.scale * c[0];
            c[1] = self.mount_offset.y + self.scale * c[1];
            c[2] = self.mount_offset.z + self.scale * c[2];
        }
        m
    }

    /// Calls `f(row, col)` for every pixel covered by the projected shell
    /// (pixels may repeat across triangles).
    pub fn for_each_masked_pixel(&self, pose: &Pose, rows: usize, cols: usize, mut f: impl FnMut(usize, usize)) {
        let m = self.posed_mesh();
        let screen: Vec<_> = m.vertices_iter().map(|v| pose.project(&v)).collect();
        for t in m.triangles.iter() {
            let p = t.map(|i| screen[i as usize]);
            for_each_covered_pixel(p, rows, cols, |r, c, _| f(r, c));
        }
    }
}

/// Sets every pixel inside the projection of any headset triangle to 0.
pub fn mask_hmd(image: &GrayImage, hmd: &HmdProxy, pose: &Pose) -> GrayImage {
    let mut out = image.clone();
    hmd.for_each_masked_pixel(pose, image.rows(), image.cols(), |r, c| out.set(r, c, 0));
    out
}

pub fn mask_hmd_rgb(image: &RgbImage, hmd: &HmdProxy, pose: &Pose) -> RgbImage {
    let mut out = image.clone();
    hmd.for_each_masked_pixel(pose, image.rows(), image.cols(), |r, c| out.set(r, c, [0; 3]));
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::Vector2;

    #[test]
    fn box_is_closed() {
        // every undirected edge is shared by exactly two triangles
        let hmd = HmdProxy::default();
        let mut edges = std::collections::HashMap::new();
        for t in hmd.mesh.triangles.iter() {
            for k in 0..3 {
                let (a, b) = (t[k], t[(k + 1) % 3]);
                *edges.entry((a.min(b), a.max(b))).or_insert(0) += 1;
            }
        }
        assert!(edges.values().all(|&n| n == 2));
        assert_eq!(hmd.mesh.triangles.len(), 20);
    }

    #[test]
    fn centroid_pixel_is_black_and_far_pixels_untouched() {
        let hmd = HmdProxy::default();
        let pose = Pose::new(nalgebra::Matrix3::identity(), Vector2::new(160.0, 140.0), 100.0).unwrap();
        let img = GrayImage::new(280, 320, 200);
        let out = mask_hmd(&img, &hmd, &pose);
        let c = pose.project(&hmd.mount_offset);
        assert_eq!(out.get(c.y.round() as usize, c.x.round() as usize), 0);
        // bounding box of the projection
        let m = hmd.posed_mesh();
        let pts: Vec<_> = m.vertices_iter().map(|v| pose.project(&v)).collect();
        let max_y = pts.iter().map(|p| p.y).fold(f64::MIN, f64::max);
        for r in (max_y.ceil() as usize + 1)..280 {
            for col in 0..320 {
                assert_eq!(out.get(r, col), 200);
            }
        }
    }
}
