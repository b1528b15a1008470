use std::cmp::Reverse;
use std::collections::{BinaryHeap, VecDeque};

use nalgebra::Vector2;

use crate::error::{Error, Result};
use crate::image::GrayImage;

pub const BOX: usize = 5;

/// Centre of the darkest 5×5 box, as `(row, col)`. Only interior pixels
/// (whose box lies inside the image) are candidates; ties go to the
/// smallest row, then column.
pub fn darkest_point(image: &GrayImage) -> Result<(usize, usize)> {
    let sums = box_sums(image)?;
    let half = BOX / 2;
    let inner_cols = image.cols() - 2 * half;
    let (mut best, mut best_i) = (u32::MAX, 0);
    for (i, &s) in sums.iter().enumerate() {
        if s < best {
            best = s;
            best_i = i;
        }
    }
    Ok((best_i / inner_cols + half, best_i % inner_cols + half))
}

/// 5×5 box sums for every interior pixel, row-major over the
/// `(rows − 4) × (cols − 4)` interior.
pub fn box_sums(image: &GrayImage) -> Result<Vec<u32>> {
    let (rows, cols) = (image.rows(), image.cols());
    if rows < BOX || cols < BOX {
        return Err(Error::InvalidInput(format!("image {rows}x{cols} smaller than 5x5")));
    }
    let w = cols + 1;
    let mut integral = vec![0u32; (rows + 1) * w];
    for r in 0..rows {
        let mut acc = 0u32;
        for c in 0..cols {
            acc += u32::from(image.get(r, c));
            integral[(r + 1) * w + c + 1] = integral[r * w + c + 1] + acc;
        }
    }
    let mut out = Vec::with_capacity((rows - BOX + 1) * (cols - BOX + 1));
    for r in 0..=rows - BOX {
        for c in 0..=cols - BOX {
            let s = integral[(r + BOX) * w + c + BOX] + integral[r * w + c]
                - integral[r * w + c + BOX]
                - integral[(r + BOX) * w + c];
            out.push(s);
        }
    }
    Ok(out)
}

/// Central-difference gradient magnitude with replicated borders.
pub fn gradient_magnitude(image: &GrayImage) -> Vec<f64> {
    let (rows, cols) = (image.rows(), image.cols());
    let px = |r: usize, c: usize| f64::from(image.get(r, c));
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        let (ru, rd) = (r.saturating_sub(1), (r + 1).min(rows - 1));
        for c in 0..cols {
            let (cl, cr) = (c.saturating_sub(1), (c + 1).min(cols - 1));
            let gx = (px(r, cr) - px(r, cl)) / 2.0;
            let gy = (px(rd, c) - px(ru, c)) / 2.0;
            out[r * cols + c] = gx.hypot(gy);
        }
    }
    out
}

pub const LABEL_NONE: u8 = 0;
pub const LABEL_PUPIL: u8 = 1;
pub const LABEL_BACKGROUND: u8 = 2;

/// Brightness margin above the seed's 5×5 mean beyond which a pixel is a
/// background marker.
pub const BRIGHT_MARGIN: f64 = 20.0;

/// Marker image for the pupil: the seed pixel is pupil; the image border
/// and the bright region (brighter than the seed-box mean by
/// [`BRIGHT_MARGIN`], eroded twice so the gradient ridge stays unclaimed)
/// are background.
pub fn pupil_markers(image: &GrayImage, seed: (usize, usize)) -> Vec<u8> {
    let (rows, cols) = (image.rows(), image.cols());
    let mut sum = 0.0;
    let mut n = 0.0;
    for r in seed.0.saturating_sub(2)..(seed.0 + 3).min(rows) {
        for c in seed.1.saturating_sub(2)..(seed.1 + 3).min(cols) {
            sum += f64::from(image.get(r, c));
            n += 1.0;
        }
    }
    let threshold = sum / n + BRIGHT_MARGIN;
    let bright = BinaryMask {
        rows,
        cols,
        data: image.data().iter().map(|&v| f64::from(v) >= threshold).collect(),
    }
    .erode_cross()
    .erode_cross();
    let mut markers = vec![LABEL_NONE; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            let border = r == 0 || c == 0 || r == rows - 1 || c == cols - 1;
            if border || bright.get(r, c) {
                markers[r * cols + c] = LABEL_BACKGROUND;
            }
        }
    }
    markers[seed.0 * cols + seed.1] = LABEL_PUPIL;
    markers
}

/// Meyer flooding of `gradient` from labelled `markers`. Pixels are
/// processed by increasing gradient, ties in insertion order, over
/// 4-neighbourhoods; a pixel takes the label of the neighbour that queued it.
pub fn watershed(gradient: &[f64], rows: usize, cols: usize, markers: &[u8]) -> Vec<u8> {
    let mut labels = markers.to_vec();
    let mut queued: Vec<bool> = labels.iter().map(|&l| l != LABEL_NONE).collect();
    let mut heap = BinaryHeap::new();
    let mut order = 0u64;
    let key = |g: f64| Reverse(g.max(0.0).to_bits());

    let mut push_neighbours = |i: usize, label: u8, heap: &mut BinaryHeap<_>, queued: &mut Vec<bool>| {
        let (r, c) = (i / cols, i % cols);
        let mut visit = |j: usize| {
            if !queued[j] {
                queued[j] = true;
                heap.push((key(gradient[j]), Reverse(order), j, label));
                order += 1;
            }
        };
        if r > 0 {
            visit(i - cols);
        }
        if r + 1 < rows {
            visit(i + cols);
        }
        if c > 0 {
            visit(i - 1);
        }
        if c + 1 < cols {
            visit(i + 1);
        }
    };

    for i in 0..rows * cols {
        if labels[i] != LABEL_NONE {
            push_neighbours(i, labels[i], &mut heap, &mut queued);
        }
    }
    while let Some((_, _, i, label)) = heap.pop() {
        labels[i] = label;
        push_neighbours(i, label, &mut heap, &mut queued);
    }
    labels
}

/// Binary mask with `(row, col)` indexing.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<bool>,
}

impl BinaryMask {
    pub fn new(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![false; rows * cols],
        }
    }

    pub fn get(&self, r: usize, c: usize) -> bool {
        self.data[r * self.cols + c]
    }

    /// Out-of-range coordinates read as `false`.
    pub fn get_signed(&self, r: isize, c: isize) -> bool {
        r >= 0 && c >= 0 && (r as usize) < self.rows && (c as usize) < self.cols && self.get(r as usize, c as usize)
    }

    pub fn set(&mut self, r: usize, c: usize, v: bool) {
        self.data[r * self.cols + c] = v;
    }

    pub fn area(&self) -> usize {
        self.data.iter().filter(|&&v| v).count()
    }

    fn neighbours4(&self, i: usize) -> impl Iterator<Item = usize> + '_ {
        let (r, c) = (i / self.cols, i % self.cols);
        [
            (r > 0).then(|| i - self.cols),
            (r + 1 < self.rows).then(|| i + self.cols),
            (c > 0).then(|| i - 1),
            (c + 1 < self.cols).then(|| i + 1),
        ]
        .into_iter()
        .flatten()
    }

    /// Sets every background pixel not 4-connected to the border.
    pub fn fill_holes(&self) -> Self {
        let mut outside = vec![false; self.data.len()];
        let mut queue = VecDeque::new();
        for r in 0..self.rows {
            for c in 0..self.cols {
                let i = r * self.cols + c;
                let border = r == 0 || c == 0 || r == self.rows - 1 || c == self.cols - 1;
                if border && !self.data[i] {
                    outside[i] = true;
                    queue.push_back(i);
                }
            }
        }
        while let Some(i) = queue.pop_front() {
            for j in self.neighbours4(i) {
                if !self.data[j] && !outside[j] {
                    outside[j] = true;
                    queue.push_back(j);
                }
            }
        }
        Self {
            rows: self.rows,
            cols: self.cols,
            data: outside.iter().map(|&o| !o).collect(),
        }
    }

    /// Dilation by the 3×3 cross; outside pixels read as unset.
    pub fn dilate_cross(&self) -> Self {
        let mut out = self.clone();
        for i in 0..self.data.len() {
            if !self.data[i] && self.neighbours4(i).any(|j| self.data[j]) {
                out.data[i] = true;
            }
        }
        out
    }

    /// Erosion by the 3×3 cross; outside pixels read as set.
    pub fn erode_cross(&self) -> Self {
        let mut out = self.clone();
        for i in 0..self.data.len() {
            if self.data[i] && self.neighbours4(i).any(|j| !self.data[j]) {
                out.data[i] = false;
            }
        }
        out
    }

    pub fn close_cross(&self) -> Self {
        self.dilate_cross().erode_cross()
    }

    /// 4-connected component containing `seed` (empty if the seed is unset).
    pub fn component(&self, seed: (usize, usize)) -> Self {
        let mut out = Self::new(self.rows, self.cols);
        let s = seed.0 * self.cols + seed.1;
        if !self.data[s] {
            return out;
        }
        out.data[s] = true;
        let mut queue = VecDeque::from([s]);
        while let Some(i) = queue.pop_front() {
            for j in self.neighbours4(i) {
                if self.data[j] && !out.data[j] {
                    out.data[j] = true;
                    queue.push_back(j);
                }
            }
        }
        out
    }

    /// Number of 4-connected components of the set and 8-connected
    /// components of the complement that do not touch the border (holes).
    pub fn hole_count(&self) -> usize {
        let filled = self.fill_holes();
        let mut seen = vec![false; self.data.len()];
        let mut holes = 0;
        for i in 0..self.data.len() {
            if filled.data[i] && !self.data[i] && !seen[i] {
                holes += 1;
                seen[i] = true;
                let mut queue = VecDeque::from([i]);
                while let Some(k) = queue.pop_front() {
                    for j in self.neighbours4(k) {
                        if filled.data[j] && !self.data[j] && !seen[j] {
                            seen[j] = true;
                            queue.push_back(j);
                        }
                    }
                }
            }
        }
        holes
    }

    /// Midpoints of every pixel edge separating a set pixel from an unset
    /// one (or from outside the image), as `(x = col, y = row)`.
    pub fn crack_points(&self) -> Vec<Vector2<f64>> {
        let mut out = Vec::new();
        for r in 0..self.rows as isize {
            for c in 0..self.cols as isize {
                if !self.get_signed(r, c) {
                    continue;
                }
                for (dr, dc) in [(-1, 0), (1, 0), (0, -1), (0, 1)] {
                    if !self.get_signed(r + dr, c + dc) {
                        out.push(Vector2::new(c as f64 + dc as f64 / 2.0, r as f64 + dr as f64 / 2.0));
                    }
                }
            }
        }
        out
    }

    /// Moore-neighbour trace of the outer boundary of the component holding
    /// the first set pixel in raster order, as `(row, col)` pixels in
    /// clockwise order (image coordinates). Stops when the start pixel is
    /// re-entered from the initial direction.
    pub fn moore_contour(&self) -> Vec<(usize, usize)> {
        let Some(first) = self.data.iter().position(|&v| v) else {
            return Vec::new();
        };
        // clockwise on screen starting west
        const DIRS: [(isize, isize); 8] = [(0, -1), (-1, -1), (-1, 0), (-1, 1), (0, 1), (1, 1), (1, 0), (1, -1)];
        let start = ((first / self.cols) as isize, (first % self.cols) as isize);
        let mut contour = vec![(start.0 as usize, start.1 as usize)];
        let mut cur = start;
        // the raster-order first pixel has its west neighbour unset
        let mut back = 0usize;
        let mut first_move = None;
        for _ in 0..4 * self.data.len() + 8 {
            let Some((p, nb)) = (1..=8).find_map(|k| {
                let d = (back + k) % 8;
                let p = (cur.0 + DIRS[d].0, cur.1 + DIRS[d].1);
                self.get_signed(p.0, p.1).then(|| {
                    let prev = DIRS[(back + k - 1) % 8];
                    let b = (cur.0 + prev.0 - p.0, cur.1 + prev.1 - p.1);
                    (p, DIRS.iter().position(|&dd| dd == b).expect("ring neighbours are adjacent"))
                })
            }) else {
                break; // isolated pixel
            };
            match first_move {
                Some(m) if m == (cur, p) => break,
                None => first_move = Some((cur, p)),
                _ => {}
            }
            contour.push((p.0 as usize, p.1 as usize));
            cur = p;
            back = nb;
        }
        if contour.len() > 1 && contour.last() == contour.first() {
            contour.pop();
        }
        contour
    }
}

/// Refined pupil segmentation.
#[derive(Debug, Clone, PartialEq)]
pub struct PupilMask {
    pub mask: BinaryMask,
    /// Closed Moore boundary, `(row, col)`; the last pixel neighbours the first.
    pub contour: Vec<(usize, usize)>,
}

impl PupilMask {
    pub fn area(&self) -> usize {
        self.mask.area()
    }
}

/// Hole filling, one closing with the 3×3 cross, a second hole fill and
/// the component containing `seed`.
pub fn refine(mask: &BinaryMask, seed: (usize, usize)) -> BinaryMask {
    mask.fill_holes().close_cross().fill_holes().component(seed)
}

/// Marker watershed of the pupil region around `seed` followed by
/// [`refine`].
pub fn segment_pupil(image: &GrayImage, seed: (usize, usize)) -> Result<PupilMask> {
    let (rows, cols) = (image.rows(), image.cols());
    if seed.0 >= rows || seed.1 >= cols {
        return Err(Error::InvalidInput(format!(
            "seed ({}, {}) outside {rows}x{cols} image",
            seed.0, seed.1
        )));
    }
    if seed.0 == 0 || seed.1 == 0 || seed.0 == rows - 1 || seed.1 == cols - 1 {
        return Err(Error::InvalidInput(format!(
            "seed ({}, {}) lies on the image border",
            seed.0, seed.1
        )));
    }
    let labels = watershed(&gradient_magnitude(image), rows, cols, &pupil_markers(image, seed));
    let raw = BinaryMask {
        rows,
        cols,
        data: labels.iter().map(|&l| l == LABEL_PUPIL).collect(),
    };
    let mask = refine(&raw, seed);
    let contour = mask.moore_contour();
    Ok(PupilMask { mask, contour })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn image_with(rows: usize, cols: usize, bg: u8, mut f: impl FnMut(usize, usize) -> Option<u8>) -> GrayImage {
        let mut img = GrayImage::new(rows, cols, bg);
        for r in 0..rows {
            for c in 0..cols {
                if let Some(v) = f(r, c) {
                    img.set(r, c, v);
                }
            }
        }
        img
    }

    #[test]
    fn darkest_patch_centre() {
        let img = image_with(30, 40, 255, |r, c| ((10..15).contains(&r) && (20..25).contains(&c)).then_some(0));
        assert_eq!(darkest_point(&img).unwrap(), (12, 22));
    }

    #[test]
    fn uniform_image_ties_to_first_interior() {
        assert_eq!(darkest_point(&GrayImage::new(9, 9, 77)).unwrap(), (2, 2));
    }

    #[test]
    fn tiny_image_rejected() {
        assert!(darkest_point(&GrayImage::new(4, 9, 0)).is_err());
    }

    #[test]
    fn box_sums_match_naive() {
        let img = image_with(8, 11, 0, |r, c| Some(((r * 31 + c * 17) % 251) as u8));
        let sums = box_sums(&img).unwrap();
        for r in 2..6 {
            for c in 2..9 {
                let mut s = 0u32;
                for dr in 0..5 {
                    for dc in 0..5 {
                        s += u32::from(img.get(r + dr - 2, c + dc - 2));
                    }
                }
                assert_eq!(sums[(r - 2) * 7 + (c - 2)], s);
            }
        }
    }

    #[test]
    fn disjoint_blob_excluded() {
        let img = image_with(40, 60, 220, |r, c| {
            let a = (r as f64 - 20.0).hypot(c as f64 - 15.0) <= 6.0;
            let b = (r as f64 - 20.0).hypot(c as f64 - 45.0) <= 6.0;
            (a || b).then_some(20)
        });
        let m = segment_pupil(&img, (20, 15)).unwrap();
        assert!(m.mask.get(20, 15));
        assert!(!m.mask.get(20, 45));
        assert_eq!(m.area(), (0..40).flat_map(|r| (0..30).map(move |c| (r, c)))
            .filter(|&(r, c)| (r as f64 - 20.0).hypot(c as f64 - 15.0) <= 6.0)
            .count());
    }

    #[test]
    fn bright_spot_inside_is_filled() {
        let img = image_with(40, 40, 220, |r, c| {
            let d = (r as f64 - 20.0).hypot(c as f64 - 20.0);
            if d <= 1.5 {
                Some(255)
            } else {
                (d <= 10.0).then_some(20)
            }
        });
        let m = segment_pupil(&img, (14, 20)).unwrap();
        assert_eq!(m.mask.hole_count(), 0);
        assert!(m.mask.get(20, 20));
    }

    #[test]
    fn border_seed_rejected() {
        let img = GrayImage::new(10, 10, 0);
        assert!(segment_pupil(&img, (0, 5)).is_err());
        assert!(segment_pupil(&img, (5, 9)).is_err());
        assert!(segment_pupil(&img, (10, 5)).is_err());
    }

    #[test]
    fn contour_of_square_is_its_ring() {
        let mut m = BinaryMask::new(10, 10);
        for r in 3..7 {
            for c in 2..6 {
                m.set(r, c, true);
            }
        }
        let contour = m.moore_contour();
        assert_eq!(contour.len(), 12);
        assert_eq!(contour[0], (3, 2));
        for w in contour.windows(2).chain(std::iter::once(&[contour[11], contour[0]][..])) {
            let dr = w[0].0.abs_diff(w[1].0);
            let dc = w[0].1.abs_diff(w[1].1);
            assert!(dr <= 1 && dc <= 1 && dr + dc > 0);
        }
        let interior: Vec<_> = contour.iter().filter(|&&(r, c)| (4..6).contains(&r) && (3..5).contains(&c)).collect();
        assert!(interior.is_empty());
    }

    #[test]
    fn single_pixel_contour() {
        let mut m = BinaryMask::new(5, 5);
        m.set(2, 2, true);
        assert_eq!(m.moore_contour(), vec![(2, 2)]);
    }

    #[test]
    fn crack_points_of_single_pixel() {
        let mut m = BinaryMask::new(3, 3);
        m.set(1, 1, true);
        let mut pts: Vec<_> = m.crack_points().iter().map(|p| (p.x, p.y)).collect();
        pts.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert_eq!(pts, vec![(0.5, 1.0), (1.0, 0.5), (1.0, 1.5), (1.5, 1.0)]);
    }

    proptest! {
        #[test]
        fn darkest_point_shift_invariant(seed in any::<u64>(), k in 0u8..40) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let img = image_with(12, 15, 0, |_, _| Some(rng_value(&mut rng)));
            fn rng_value(rng: &mut rand_chacha::ChaCha8Rng) -> u8 { rng.random_range(0..200) }
            let shifted = image_with(12, 15, 0, |r, c| Some(img.get(r, c) + k));
            prop_assert_eq!(darkest_point(&img).unwrap(), darkest_point(&shifted).unwrap());
        }

        #[test]
        fn refine_idempotent(seed in any::<u64>()) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let mut m = BinaryMask::new(20, 20);
            for r in 4..16 {
                for c in 4..16 {
                    m.set(r, c, rng.random_bool(0.8));
                }
            }
            m.set(10, 10, true);
            let once = refine(&m, (10, 10));
            let twice = refine(&once, (10, 10));
            prop_assert_eq!(once, twice);
        }
    }
}
