//! Segment-test corner detector on a 16-pixel Bresenham circle of radius 3.

use crate::exec::Exec;
use crate::image::IntensityImage;

/// Circle offsets as `(drow, dcol)`, clockwise starting straight up.
pub const CIRCLE: [(isize, isize); 16] = [
    (-3, 0),
    (-3, 1),
    (-2, 2),
    (-1, 3),
    (0, 3),
    (1, 3),
    (2, 2),
    (3, 1),
    (3, 0),
    (3, -1),
    (2, -2),
    (1, -3),
    (0, -3),
    (-1, -3),
    (-2, -2),
    (-3, -1),
];

pub const ARC_LENGTH: usize = 9;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Corner {
    pub row: usize,
    pub col: usize,
    pub response: f64,
}

/// Longest circular run of `true`.
fn longest_run(flags: u16) -> usize {
    if flags == 0xFFFF {
        return 16;
    }
    // doubling the ring turns the circular run into a linear one
    let doubled = (flags as u32) | ((flags as u32) << 16);
    let mut best = 0;
    let mut run = 0;
    for i in 0..32 {
        if doubled & (1 << i) != 0 {
            run += 1;
            best = best.max(run);
        } else {
            run = 0;
        }
    }
    best.min(16)
}

/// Corner strength at one pixel, or `None` when the segment test fails.
///
/// The strength is the summed excess `|I − I_c| − t` over the circle
/// pixels of the winning polarity.
pub fn segment_test(img: &IntensityImage, row: usize, col: usize, threshold: u8) -> Option<f64> {
    let center = img.at(row, col) as i32;
    let t = threshold as i32;
    let (r, c) = (row as isize, col as isize);
    let mut ring = [0i32; 16];
    for (k, (dr, dc)) in CIRCLE.iter().enumerate() {
        ring[k] = img.at_wrapped(r + dr, c + dc) as i32;
    }
    // compass pixels: any qualifying arc of 9 contains at least two of them
    let compass = [ring[0], ring[4], ring[8], ring[12]];
    let bright_compass = compass.iter().filter(|&&v| v > center + t).count();
    let dark_compass = compass.iter().filter(|&&v| v < center - t).count();
    if bright_compass < 2 && dark_compass < 2 {
        return None;
    }
    let mut bright = 0u16;
    let mut dark = 0u16;
    let mut bright_sum = 0i32;
    let mut dark_sum = 0i32;
    for (k, v) in ring.iter().enumerate() {
        if *v > center + t {
            bright |= 1 << k;
            bright_sum += v - center - t;
        } else if *v < center - t {
            dark |= 1 << k;
            dark_sum += center - v - t;
        }
    }
    let mut best: Option<f64> = None;
    if longest_run(bright) >= ARC_LENGTH {
        best = Some(bright_sum as f64);
    }
    if longest_run(dark) >= ARC_LENGTH {
        best = Some(best.map_or(dark_sum as f64, |b| b.max(dark_sum as f64)));
    }
    best
}

/// All corners after 3×3 non-maximum suppression, in row-major order.
///
/// Rows within 3 pixels of the top or bottom edge are skipped; columns wrap.
pub fn detect_corners(img: &IntensityImage, threshold: u8, exec: Exec) -> Vec<Corner> {
    let (rows, cols) = (img.rows(), img.cols());
    if rows < 7 || cols < 7 {
        return Vec::new();
    }
    let scores: Vec<Vec<f32>> = exec.map_range(rows, |r| {
        if r < 3 || r + 3 >= rows {
            return vec![0.0; cols];
        }
        (0..cols)
            .map(|c| segment_test(img, r, c, threshold).map_or(0.0, |s| s as f32 + 1.0))
            .collect()
    });
    // non-maximum suppression; equal responses resolve to the lower index
    let per_row: Vec<Vec<Corner>> = exec.map_range(rows, |r| {
        let mut out = Vec::new();
        for c in 0..cols {
            let s = scores[r][c];
            if s <= 0.0 {
                continue;
            }
            let mut keep = true;
            'nb: for dr in -1isize..=1 {
                let rr = r as isize + dr;
                if rr < 0 || rr >= rows as isize {
                    continue;
                }
                for dc in -1isize..=1 {
                    if dr == 0 && dc == 0 {
                        continue;
                    }
                    let cc = (c as isize + dc).rem_euclid(cols as isize) as usize;
                    let n = scores[rr as usize][cc];
                    let earlier = (rr as usize, cc) < (r, c);
                    if n > s || (n == s && earlier) {
                        keep = false;
                        break 'nb;
                    }
                }
            }
            if keep {
                out.push(Corner {
                    row: r,
                    col: c,
                    response: (s - 1.0) as f64,
                });
            }
        }
        out
    });
    per_row.into_iter().flatten().collect()
}
