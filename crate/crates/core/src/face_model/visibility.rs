use nalgebra::Vector3;

use super::{Mesh, Pose};

/// Depth slack, in object units, below which a surface does not count as
/// strictly nearer than a vertex.
pub const DEPTH_TOLERANCE: f64 = 1e-6;

/// Indices (ascending) of the vertices of `mesh` that no triangle of `mesh`
/// or of `occluders` covers from strictly nearer along the orthographic view
/// ray. Occluders are expressed in the same object frame as `mesh` and are
/// posed with the same `pose`.
///
/// Triangles are bucketed on a uniform grid over their projected bounding
/// boxes so each vertex only tests the triangles overlapping its cell.
pub fn visible_vertices(mesh: &Mesh, pose: &Pose, occluders: &[Mesh]) -> Vec<usize> {
    if mesh.n_vertices() == 0 {
        return Vec::new();
    }
    let rot = pose.rotation();
    let rotate = |v: Vector3<f64>| rot * v;

    let mut tris: Vec<[Vector3<f64>; 3]> = Vec::new();
    let own: Vec<Vector3<f64>> = mesh.vertices_iter().map(rotate).collect();
    for m in std::iter::once(mesh).chain(occluders) {
        let pts: Vec<Vector3<f64>> = if std::ptr::eq(m, mesh) {
            own.clone()
        } else {
            m.vertices_iter().map(rotate).collect()
        };
        for t in m.triangles.iter() {
            let tri = [pts[t[0] as usize], pts[t[1] as usize], pts[t[2] as usize]];
            if signed_area(&tri).abs() > 1e-15 {
                tris.push(tri);
            }
        }
    }
    if tris.is_empty() {
        return (0..own.len()).collect();
    }

    let grid = Grid::build(&tris);
    own.iter()
        .enumerate()
        .filter(|(_, q)| {
            !grid.cell_triangles(q.x, q.y).iter().any(|&ti| {
                covered_depth(&tris[ti], q.x, q.y).is_some_and(|z| z > q.z + DEPTH_TOLERANCE)
            })
        })
        .map(|(i, _)| i)
        .collect()
}

fn signed_area(t: &[Vector3<f64>; 3]) -> f64 {
    (t[1].x - t[0].x) * (t[2].y - t[0].y) - (t[2].x - t[0].x) * (t[1].y - t[0].y)
}

/// Interpolated depth of the triangle's plane at `(x, y)` if the point lies
/// inside (or on the boundary of) its projection.
fn covered_depth(t: &[Vector3<f64>; 3], x: f64, y: f64) -> Option<f64> {
    let area = signed_area(t);
    let w0 = ((t[1].x - x) * (t[2].y - y) - (t[2].x - x) * (t[1].y - y)) / area;
    let w1 = ((t[2].x - x) * (t[0].y - y) - (t[0].x - x) * (t[2].y - y)) / area;
    let w2 = 1.0 - w0 - w1;
    const EPS: f64 = -1e-12;
    (w0 >= EPS && w1 >= EPS && w2 >= EPS).then(|| w0 * t[0].z + w1 * t[1].z + w2 * t[2].z)
}

struct Grid {
    min_x: f64,
    min_y: f64,
    cell: f64,
    nx: usize,
    ny: usize,
    cells: Vec<Vec<usize>>,
}

impl Grid {
    fn build(tris: &[[Vector3<f64>; 3]]) -> Self {
        let (mut min_x, mut min_y) = (f64::INFINITY, f64::INFINITY);
        let (mut max_x, mut max_y) = (f64::NEG_INFINITY, f64::NEG_INFINITY);
        let mut extent_sum = 0.0;
        for t in tris {
            let (lx, hx) = span(t.iter().map(|p| p.x));
            let (ly, hy) = span(t.iter().map(|p| p.y));
            min_x = min_x.min(lx);
            min_y = min_y.min(ly);
            max_x = max_x.max(hx);
            max_y = max_y.max(hy);
            extent_sum += (hx - lx).max(hy - ly);
        }
        let mean_extent = extent_sum / tris.len() as f64;
        let span_max = (max_x - min_x).max(max_y - min_y).max(1e-12);
        let cell = mean_extent.max(span_max / 512.0).max(1e-12);
        let nx = ((max_x - min_x) / cell).floor() as usize + 1;
        let ny = ((max_y - min_y) / cell).floor() as usize + 1;
        let mut cells = vec![Vec::new(); nx * ny];
        let pad = 1e-9 * span_max;
        for (i, t) in tris.iter().enumerate() {
            let (lx, hx) = span(t.iter().map(|p| p.x));
            let (ly, hy) = span(t.iter().map(|p| p.y));
            let cx0 = (((lx - pad - min_x) / cell).floor().max(0.0) as usize).min(nx - 1);
            let cx1 = (((hx + pad - min_x) / cell).floor().max(0.0) as usize).min(nx - 1);
            let cy0 = (((ly - pad - min_y) / cell).floor().max(0.0) as usize).min(ny - 1);
            let cy1 = (((hy + pad - min_y) / cell).floor().max(0.0) as usize).min(ny - 1);
            for cy in cy0..=cy1 {
                for cx in cx0..=cx1 {
                    cells[cy * nx + cx].push(i);
                }
            }
        }
        Self {
            min_x,
            min_y,
            cell,
            nx,
            ny,
            cells,
        }
    }

    fn cell_triangles(&self, x: f64, y: f64) -> &[usize] {
        let fx = ((x - self.min_x) / self.cell).floor();
        let fy = ((y - self.min_y) / self.cell).floor();
        if fx < 0.0 || fy < 0.0 || fx as usize >= self.nx || fy as usize >= self.ny {
            return &[];
        }
        &self.cells[fy as usize * self.nx + fx as usize]
    }
}

fn span(it: impl Iterator<Item = f64>) -> (f64, f64) {
    it.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::Arc;

    use nalgebra::Vector2;

    fn tri_mesh(v: Vec<f64>, t: Vec<[u32; 3]>) -> Mesh {
        Mesh::new(v, Arc::from(t)).unwrap()
    }

    #[test]
    fn lone_triangle_fully_visible() {
        let m = tri_mesh(vec![0., 0., 0., 1., 0., 0., 0., 1., 0.], vec![[0, 1, 2]]);
        assert_eq!(visible_vertices(&m, &Pose::identity(), &[]), vec![0, 1, 2]);
    }

    #[test]
    fn vertex_behind_quad_is_hidden() {
        let m = tri_mesh(vec![0.5, 0.5, 0.0, 5., 5., 0., 6., 5., 0.], vec![[0, 1, 2]]);
        let quad = tri_mesh(
            vec![0., 0., 1., 1., 0., 1., 1., 1., 1., 0., 1., 1.],
            vec![[0, 1, 2], [0, 2, 3]],
        );
        let vis = visible_vertices(&m, &Pose::identity(), std::slice::from_ref(&quad));
        assert_eq!(vis, vec![1, 2]);
        // the same quad behind the vertex does not hide it
        let behind = quad.translated(Vector3::new(0.0, 0.0, -2.0));
        assert_eq!(visible_vertices(&m, &Pose::identity(), &[behind]), vec![0, 1, 2]);
    }

    #[test]
    fn pose_changes_view_direction() {
        // vertex at the origin, a quad at x = 1 off to the side
        let m = tri_mesh(vec![0., 0., 0., 0., 5., 0., 0., 6., 1.], vec![[0, 1, 2]]);
        let quad = tri_mesh(
            vec![1., -1., -1., 1., 1., -1., 1., 1., 1., 1., -1., 1.],
            vec![[0, 1, 2], [0, 2, 3]],
        );
        assert!(visible_vertices(&m, &Pose::identity(), std::slice::from_ref(&quad)).contains(&0));
        // yaw by -90°: +x now points toward the viewer
        let p = Pose::from_angles(-std::f64::consts::FRAC_PI_2, 0.0, 0.0, Vector2::zeros(), 1.0).unwrap();
        assert!(!visible_vertices(&m, &p, &[quad]).contains(&0));
    }

    #[test]
    fn empty_mesh_gives_empty_set() {
        let m = tri_mesh(vec![], vec![]);
        assert!(visible_vertices(&m, &Pose::identity(), &[]).is_empty());
    }
}
