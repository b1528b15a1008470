use nalgebra::{Vector2, Vector3};

use super::raster::for_each_covered_pixel;
use crate::error::{Error, Result};
use crate::face_model::{FaceBasis, FaceParams, Mesh, Pose};
use crate::image::{luminance, GrayImage, RgbImage};

pub const BACKGROUND: u8 = 255;

/// Per-pixel output of the rasterizer before quantisation.
pub struct RenderBuffers {
    pub rows: usize,
    pub cols: usize,
    /// Linear RGB radiance in `[0, 1]` per pixel (background = 1).
    pub color: Vec<[f64; 3]>,
    /// Depth of the visible surface; `-inf` where nothing was drawn.
    pub depth: Vec<f64>,
}

impl RenderBuffers {
    pub fn covered(&self, row: usize, col: usize) -> bool {
        self.depth[row * self.cols + col].is_finite()
    }

    pub fn to_gray(&self) -> GrayImage {
        let mut img = GrayImage::new(self.rows, self.cols, BACKGROUND);
        for (i, c) in self.color.iter().enumerate() {
            if self.depth[i].is_finite() {
                img.data_mut()[i] = quantize(luminance(*c));
            }
        }
        img
    }

    pub fn to_rgb(&self) -> RgbImage {
        let mut img = RgbImage::new(self.rows, self.cols, [BACKGROUND; 3]);
        for r in 0..self.rows {
            for c in 0..self.cols {
                let i = r * self.cols + c;
                if self.depth[i].is_finite() {
                    let v = self.color[i];
                    img.set(r, c, [quantize(v[0]), quantize(v[1]), quantize(v[2])]);
                }
            }
        }
        img
    }
}

fn quantize(v: f64) -> u8 {
    (v * 255.0).round().clamp(0.0, 255.0) as u8
}

/// Z-buffered flat-normal Lambertian rasterisation of `mesh` with
/// per-vertex RGB `albedo` (clamped to `[0, 1]`), barycentrically
/// interpolated. Light direction is in view space and points toward the
/// light; normals are flipped to face the viewer (two-sided surfaces).
pub fn rasterize(
    mesh: &Mesh,
    albedo: &[f64],
    pose: &Pose,
    rows: usize,
    cols: usize,
    light_dir: Vector3<f64>,
) -> Result<RenderBuffers> {
    if rows == 0 || cols == 0 {
        return Err(Error::InvalidInput("zero-area viewport".into()));
    }
    let light = light_dir
        .try_normalize(1e-12)
        .ok_or_else(|| Error::InvalidInput("zero light direction".into()))?;
    let n = mesh.n_vertices();
    let rot = pose.rotation();
    let cam: Vec<Vector3<f64>> = mesh.vertices_iter().map(|v| rot * v).collect();
    let screen: Vec<Vector2<f64>> = mesh.vertices_iter().map(|v| pose.project(&v)).collect();
    let alb: Vec<[f64; 3]> = (0..n)
        .map(|i| {
            [
                albedo[3 * i].clamp(0.0, 1.0),
                albedo[3 * i + 1].clamp(0.0, 1.0),
                albedo[3 * i + 2].clamp(0.0, 1.0),
            ]
        })
        .collect();

    let mut color = vec![[1.0; 3]; rows * cols];
    let mut depth = vec![f64::NEG_INFINITY; rows * cols];
    for t in mesh.triangles.iter() {
        let [a, b, c] = t.map(|i| i as usize);
        let Some(mut normal) = (cam[b] - cam[a]).cross(&(cam[c] - cam[a])).try_normalize(1e-300) else {
            continue;
        };
        if normal.z < 0.0 {
            normal = -normal;
        }
        let shade = normal.dot(&light).max(0.0);
        let z = [cam[a].z, cam[b].z, cam[c].z];
        for_each_covered_pixel([screen[a], screen[b], screen[c]], rows, cols, |r, col, w| {
            let i = r * cols + col;
            let d = w[0] * z[0] + w[1] * z[1] + w[2] * z[2];
            if d > depth[i] {
                depth[i] = d;
                for ch in 0..3 {
                    let albedo = w[0] * alb[a][ch] + w[1] * alb[b][ch] + w[2] * alb[c][ch];
                    color[i][ch] = albedo * shade;
                }
            }
        });
    }
    Ok(RenderBuffers {
        rows,
        cols,
        color,
        depth,
    })
}

/// Grayscale render of the face described by `params` under `pose`;
/// background pixels are 255.
pub fn render_face(
    basis: &FaceBasis,
    params: &FaceParams,
    pose: &Pose,
    width: usize,
    height: usize,
    light_dir: Vector3<f64>,
) -> Result<GrayImage> {
    Ok(render_buffers(basis, params, pose, width, height, light_dir)?.to_gray())
}

pub fn render_face_rgb(
    basis: &FaceBasis,
    params: &FaceParams,
    pose: &Pose,
    width: usize,
    height: usize,
    light_dir: Vector3<f64>,
) -> Result<RgbImage> {
    Ok(render_buffers(basis, params, pose, width, height, light_dir)?.to_rgb())
}

pub fn render_buffers(
    basis: &FaceBasis,
    params: &FaceParams,
    pose: &Pose,
    width: usize,
    height: usize,
    light_dir: Vector3<f64>,
) -> Result<RenderBuffers> {
    let mesh = basis.evaluate_shape(params)?;
    let albedo = basis.evaluate_albedo(params)?;
    rasterize(&mesh, &albedo, pose, height, width, light_dir)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::Arc;

    fn mesh(v: Vec<f64>, t: Vec<[u32; 3]>) -> Mesh {
        Mesh::new(v, Arc::from(t)).unwrap()
    }

    #[test]
    fn offscreen_mesh_leaves_background() {
        let m = mesh(vec![-50., -50., 0., -40., -50., 0., -50., -40., 0.], vec![[0, 1, 2]]);
        let b = rasterize(&m, &[0.5; 9], &Pose::identity(), 20, 30, Vector3::z()).unwrap();
        let img = b.to_gray();
        assert!(img.data().iter().all(|&v| v == BACKGROUND));
    }

    #[test]
    fn flat_triangle_matches_closed_form_shading() {
        // tilted triangle so n·l is a non-trivial value
        let m = mesh(vec![2., 2., 0., 40., 5., 6., 10., 30., 3.], vec![[0, 1, 2]]);
        let b = rasterize(&m, &[0.5; 9], &Pose::identity(), 40, 50, Vector3::z()).unwrap();
        let e1 = Vector3::<f64>::new(38.0, 3.0, 6.0);
        let e2 = Vector3::new(8.0, 28.0, 3.0);
        let n = e1.cross(&e2).normalize();
        let expect = (0.5 * 255.0 * n.z.abs()).round() as u8;
        let img = b.to_gray();
        let mut covered = 0;
        for r in 0..40 {
            for c in 0..50 {
                if b.covered(r, c) {
                    covered += 1;
                    assert_eq!(img.get(r, c), expect);
                } else {
                    assert_eq!(img.get(r, c), BACKGROUND);
                }
            }
        }
        assert!(covered > 100);
    }

    #[test]
    fn zero_viewport_rejected() {
        let m = mesh(vec![0.; 9], vec![[0, 1, 2]]);
        assert!(rasterize(&m, &[0.5; 9], &Pose::identity(), 0, 10, Vector3::z()).is_err());
    }

    #[test]
    fn nearer_triangle_wins() {
        let m = mesh(
            vec![0., 0., 0., 20., 0., 0., 0., 20., 0., 0., 0., 1., 20., 0., 1., 0., 20., 1.],
            vec![[0, 1, 2], [3, 4, 5]],
        );
        let mut alb = vec![0.2; 9];
        alb.extend(vec![0.8; 9]);
        let b = rasterize(&m, &alb, &Pose::identity(), 25, 25, Vector3::z()).unwrap();
        assert_eq!(b.to_gray().get(3, 3), (0.8f64 * 255.0).round() as u8);
        assert_eq!(b.depth[3 * 25 + 3], 1.0);
    }
}
