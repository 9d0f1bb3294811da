//! Intensity images: the reflectance channel of an organized scan as an
//! 8-bit panorama, with a pixel → scan-cell index map.

use std::io::Write;
use std::path::Path;

use thiserror::Error;

use crate::geometry::Vec3;
use crate::scan::OrganizedScan;

#[derive(Debug, Error, PartialEq)]
pub enum ImageError {
    #[error("invalid parameter: {0}")]
    InvalidParam(String),
    #[error("pixel ({0}, {1}) has no valid return")]
    NoReturn(usize, usize),
    #[error("pixel ({row}, {col}) outside {rows}x{cols} image")]
    OutOfBounds {
        row: usize,
        col: usize,
        rows: usize,
        cols: usize,
    },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NormalizationParams {
    /// Intensity mapped to 255; larger values saturate.
    pub cap: f64,
    /// Divide each ring by its median before scaling.
    pub gain_equalization: bool,
}

impl Default for NormalizationParams {
    fn default() -> Self {
        Self {
            cap: 512.0,
            gain_equalization: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IntensityImage {
    rows: usize,
    cols: usize,
    pixels: Vec<u8>,
    index_map: Vec<Option<u32>>,
}

impl IntensityImage {
    /// Image from raw pixels with an empty index map. Mostly for tests.
    pub fn from_pixels(rows: usize, cols: usize, pixels: Vec<u8>) -> Self {
        assert_eq!(pixels.len(), rows * cols);
        Self {
            rows,
            cols,
            pixels,
            index_map: vec![None; rows * cols],
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    #[inline]
    pub fn at(&self, row: usize, col: usize) -> u8 {
        self.pixels[row * self.cols + col]
    }

    /// Rows clamp at the top and bottom edge, columns wrap around the
    /// panorama.
    #[inline]
    pub fn at_wrapped(&self, row: isize, col: isize) -> u8 {
        let r = row.clamp(0, self.rows as isize - 1) as usize;
        let c = col.rem_euclid(self.cols as isize) as usize;
        self.pixels[r * self.cols + c]
    }

    pub fn index_at(&self, row: usize, col: usize) -> Option<usize> {
        self.index_map[row * self.cols + col].map(|i| i as usize)
    }

    pub fn mapped_count(&self) -> usize {
        self.index_map.iter().filter(|i| i.is_some()).count()
    }

    /// Writes a binary portable graymap (P5).
    pub fn write_pgm(&self, path: impl AsRef<Path>) -> std::io::Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        write!(f, "P5\n{} {}\n255\n", self.cols, self.rows)?;
        f.write_all(&self.pixels)?;
        f.flush()
    }
}

fn median(values: &mut [f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    values.sort_by(|a, b| a.total_cmp(b));
    Some(values[values.len() / 2])
}

pub fn project(
    scan: &OrganizedScan,
    params: &NormalizationParams,
) -> Result<IntensityImage, ImageError> {
    if !(params.cap > 0.0) || !params.cap.is_finite() {
        return Err(ImageError::InvalidParam(format!(
            "cap must be positive, got {}",
            params.cap
        )));
    }
    let (rows, cols) = (scan.rows(), scan.cols());
    let mut gains = vec![1.0; rows];
    if params.gain_equalization {
        let mut all = Vec::new();
        let mut row_medians = vec![None; rows];
        for (r, m) in row_medians.iter_mut().enumerate() {
            let mut vals: Vec<f64> = (0..cols)
                .map(|c| scan.get(r, c))
                .filter(|p| p.valid)
                .map(|p| p.intensity)
                .collect();
            all.extend_from_slice(&vals);
            *m = median(&mut vals);
        }
        if let Some(global) = median(&mut all) {
            for (g, m) in gains.iter_mut().zip(&row_medians) {
                if let Some(m) = m {
                    if *m > 0.0 {
                        *g = global / m;
                    }
                }
            }
        }
    }
    let mut pixels = vec![0u8; rows * cols];
    let mut index_map = vec![None; rows * cols];
    for (r, gain) in gains.iter().enumerate() {
        for c in 0..cols {
            let p = scan.get(r, c);
            if !p.valid {
                continue;
            }
            let i = (p.intensity * gain).clamp(0.0, params.cap);
            let v = (255.0 * i / params.cap + 0.5).floor();
            let idx = r * cols + c;
            pixels[idx] = v.clamp(0.0, 255.0) as u8;
            index_map[idx] = Some(idx as u32);
        }
    }
    Ok(IntensityImage {
        rows,
        cols,
        pixels,
        index_map,
    })
}

/// 3D point behind a pixel.
pub fn lookup_point(
    img: &IntensityImage,
    scan: &OrganizedScan,
    row: usize,
    col: usize,
) -> Result<Vec3, ImageError> {
    if row >= img.rows || col >= img.cols {
        return Err(ImageError::OutOfBounds {
            row,
            col,
            rows: img.rows,
            cols: img.cols,
        });
    }
    match img.index_at(row, col) {
        Some(idx) => {
            let p = &scan.points()[idx];
            if p.valid {
                Ok(p.xyz)
            } else {
                Err(ImageError::NoReturn(row, col))
            }
        }
        None => Err(ImageError::NoReturn(row, col)),
    }
}
