//! 8-bit rasters, PGM/PNG I/O, and the resampling helpers shared by the
//! face and eye pipelines.
//!
//! Convention everywhere: row-major storage, origin at the top-left, pixel
//! `(row, col)` has its centre at image-plane coordinates `(x = col, y = row)`.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GrayImage {
    rows: usize,
    cols: usize,
    data: Vec<u8>,
}

impl GrayImage {
    pub fn new(rows: usize, cols: usize, fill: u8) -> Self {
        Self {
            rows,
            cols,
            data: vec![fill; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<u8>) -> Result<Self> {
        crate::error::check_len("image buffer", rows * cols, data.len())?;
        Ok(Self { rows, cols, data })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [u8] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> u8 {
        self.data[row * self.cols + col]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, value: u8) {
        self.data[row * self.cols + col] = value;
    }

    pub fn crop(&self, top: usize, left: usize, rows: usize, cols: usize) -> Result<Self> {
        if top + rows > self.rows || left + cols > self.cols {
            return Err(Error::InvalidInput(format!(
                "crop {rows}x{cols} at ({top},{left}) exceeds {}x{} image",
                self.rows, self.cols
            )));
        }
        let mut data = Vec::with_capacity(rows * cols);
        for r in top..top + rows {
            let start = r * self.cols + left;
            data.extend_from_slice(&self.data[start..start + cols]);
        }
        Ok(Self { rows, cols, data })
    }

    pub fn flip_horizontal(&self) -> Self {
        let mut out = self.clone();
        for r in 0..self.rows {
            out.data[r * self.cols..(r + 1) * self.cols].reverse();
        }
        out
    }

    /// Pixel values scaled to `[0, 1]` (no mean subtraction, so black stays 0).
    pub fn to_unit(&self) -> Vec<f64> {
        self.data.iter().map(|&v| f64::from(v) / 255.0).collect()
    }

    /// Box-filter resampling: every output pixel is the exact area-weighted
    /// mean of the input pixels its footprint covers.
    pub fn downscale_area(&self, rows: usize, cols: usize) -> Result<Self> {
        if rows == 0 || cols == 0 || rows > self.rows || cols > self.cols {
            return Err(Error::InvalidInput(format!(
                "cannot area-downscale {}x{} to {rows}x{cols}",
                self.rows, self.cols
            )));
        }
        let row_w = axis_weights(self.rows, rows);
        let col_w = axis_weights(self.cols, cols);
        let mut out = Vec::with_capacity(rows * cols);
        for rw in &row_w {
            for cw in &col_w {
                let mut acc = 0.0;
                for &(r, wr) in rw {
                    let base = r * self.cols;
                    for &(c, wc) in cw {
                        acc += wr * wc * f64::from(self.data[base + c]);
                    }
                }
                out.push(acc.round().clamp(0.0, 255.0) as u8);
            }
        }
        Ok(Self {
            rows,
            cols,
            data: out,
        })
    }

    pub fn write_pgm(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::with_capacity(self.data.len() + 32);
        write!(buf, "P5\n{} {}\n255\n", self.cols, self.rows).expect("write to vec");
        buf.extend_from_slice(&self.data);
        fs::write(path, buf).map_err(|e| Error::io(path, e))
    }

    pub fn read_pgm(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode_pgm(&bytes)
    }

    pub fn decode_pgm(bytes: &[u8]) -> Result<Self> {
        let mut pos = 0;
        let mut fields = Vec::with_capacity(4);
        while fields.len() < 4 {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            let start = pos;
            while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if start == pos {
                return Err(Error::format("pgm", "truncated header"));
            }
            fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
        }
        if fields[0] != "P5" {
            return Err(Error::format("pgm", format!("bad magic {:?}", fields[0])));
        }
        let parse = |s: &str| {
            s.parse::<usize>()
                .map_err(|_| Error::format("pgm", format!("bad header field {s:?}")))
        };
        let cols = parse(&fields[1])?;
        let rows = parse(&fields[2])?;
        if parse(&fields[3])? != 255 {
            return Err(Error::format("pgm", "only 8-bit maxval 255 is supported"));
        }
        // exactly one whitespace byte separates the header from the raster
        pos += 1;
        let payload = bytes
            .get(pos..pos + rows * cols)
            .ok_or_else(|| Error::format("pgm", "truncated raster"))?;
        Ok(Self {
            rows,
            cols,
            data: payload.to_vec(),
        })
    }
}

/// Overlap weights of each destination cell with the source cells along one
/// axis. Weights for a cell sum to one.
fn axis_weights(src: usize, dst: usize) -> Vec<Vec<(usize, f64)>> {
    let ratio = src as f64 / dst as f64;
    (0..dst)
        .map(|i| {
            let lo = i as f64 * ratio;
            let hi = lo + ratio;
            let first = lo.floor() as usize;
            let last = (hi.ceil() as usize).min(src);
            (first..last)
                .filter_map(|j| {
                    let overlap = (hi.min(j as f64 + 1.0) - lo.max(j as f64)).max(0.0);
                    (overlap > 1e-12).then_some((j, overlap / ratio))
                })
                .collect()
        })
        .collect()
}

/// Interleaved 8-bit RGB raster, used when colour face renders are requested.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RgbImage {
    rows: usize,
    cols: usize,
    data: Vec<u8>,
}

impl RgbImage {
    pub fn new(rows: usize, cols: usize, fill: [u8; 3]) -> Self {
        let mut data = Vec::with_capacity(rows * cols * 3);
        for _ in 0..rows * cols {
            data.extend_from_slice(&fill);
        }
        Self { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn get(&self, row: usize, col: usize) -> [u8; 3] {
        let i = (row * self.cols + col) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set(&mut self, row: usize, col: usize, px: [u8; 3]) {
        let i = (row * self.cols + col) * 3;
        self.data[i..i + 3].copy_from_slice(&px);
    }

    pub fn crop(&self, top: usize, left: usize, rows: usize, cols: usize) -> Result<Self> {
        if top + rows > self.rows || left + cols > self.cols {
            return Err(Error::InvalidInput(format!(
                "crop {rows}x{cols} at ({top},{left}) exceeds {}x{} image",
                self.rows, self.cols
            )));
        }
        let mut data = Vec::with_capacity(rows * cols * 3);
        for r in top..top + rows {
            let start = (r * self.cols + left) * 3;
            data.extend_from_slice(&self.data[start..start + cols * 3]);
        }
        Ok(Self { rows, cols, data })
    }

    pub fn write_png(&self, path: &Path) -> Result<()> {
        image::save_buffer(
            path,
            &self.data,
            self.cols as u32,
            self.rows as u32,
            image::ExtendedColorType::Rgb8,
        )
        .map_err(|e| match e {
            image::ImageError::IoError(io) => Error::io(path, io),
            other => Error::format("png", other.to_string()),
        })
    }

    pub fn to_gray(&self) -> GrayImage {
        let data = self
            .data
            .chunks_exact(3)
            .map(|p| luminance([p[0] as f64, p[1] as f64, p[2] as f64]).round() as u8)
            .collect();
        GrayImage {
            rows: self.rows,
            cols: self.cols,
            data,
        }
    }
}

/// Rec.601 luma weights; they sum to one, so a grey input maps to itself.
pub fn luminance(rgb: [f64; 3]) -> f64 {
    0.299 * rgb[0] + 0.587 * rgb[1] + 0.114 * rgb[2]
}
