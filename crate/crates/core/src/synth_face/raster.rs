use nalgebra::Vector2;

/// Calls `f(row, col, [w0, w1, w2])` for every pixel whose centre lies inside
/// or on the boundary of the triangle. Weights are barycentric; zero-area
/// triangles cover nothing.
pub(crate) fn for_each_covered_pixel(
    p: [Vector2<f64>; 3],
    rows: usize,
    cols: usize,
    mut f: impl FnMut(usize, usize, [f64; 3]),
) {
    let area = (p[1].x - p[0].x) * (p[2].y - p[0].y) - (p[2].x - p[0].x) * (p[1].y - p[0].y);
    if area == 0.0 || !area.is_finite() {
        return;
    }
    let min_x = p.iter().map(|v| v.x).fold(f64::INFINITY, f64::min).ceil().max(0.0);
    let max_x = p.iter().map(|v| v.x).fold(f64::NEG_INFINITY, f64::max).floor();
    let min_y = p.iter().map(|v| v.y).fold(f64::INFINITY, f64::min).ceil().max(0.0);
    let max_y = p.iter().map(|v| v.y).fold(f64::NEG_INFINITY, f64::max).floor();
    if max_x < 0.0 || max_y < 0.0 || min_x >= cols as f64 || min_y >= rows as f64 {
        return;
    }
    let max_x = max_x.min(cols as f64 - 1.0) as usize;
    let max_y = max_y.min(rows as f64 - 1.0) as usize;
    for r in min_y as usize..=max_y {
        let y = r as f64;
        for c in min_x as usize..=max_x {
            let x = c as f64;
            let e0 = (p[1].x - x) * (p[2].y - y) - (p[2].x - x) * (p[1].y - y);
            let e1 = (p[2].x - x) * (p[0].y - y) - (p[0].x - x) * (p[2].y - y);
            let e2 = (p[0].x - x) * (p[1].y - y) - (p[1].x - x) * (p[0].y - y);
            let inside = if area > 0.0 {
                e0 >= 0.0 && e1 >= 0.0 && e2 >= 0.0
            } else {
                e0 <= 0.0 && e1 <= 0.0 && e2 <= 0.0
            };
            if inside {
                f(r, c, [e0 / area, e1 / area, e2 / area]);
            }
        }
    }
}
