//! Plane points for the map: ground by RANSAC, the rest by ring smoothness.

use std::collections::HashMap;

use nalgebra::Matrix3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::geometry::Vec3;
use crate::scan::OrganizedScan;

pub const SMOOTHNESS_HALF_WINDOW: usize = 5;
pub const AZIMUTH_SECTORS: usize = 6;
/// Points smoother than this are plane candidates.
pub const SMOOTHNESS_MAX: f64 = 0.1;
pub const GROUND_BAND: f64 = 0.5;
pub const GROUND_INLIER_DIST: f64 = 0.05;
pub const GROUND_MAX_TILT_DEG: f64 = 30.0;
pub const GROUND_MIN_CANDIDATES: usize = 50;
/// A neighbour whose range differs by more than this is treated as an
/// occlusion boundary.
pub const OCCLUSION_JUMP: f64 = 0.3;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PlaneError {
    #[error("no ground plane: {0}")]
    NoGround(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PlaneKind {
    Ground,
    General,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlanePoint {
    pub position: Vec3,
    pub kind: PlaneKind,
}

/// Plane `normal · x + offset = 0` with an upward unit normal.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GroundModel {
    pub normal: Vec3,
    pub offset: f64,
    pub inlier_count: usize,
}

impl GroundModel {
    pub fn distance(&self, p: &Vec3) -> f64 {
        self.normal.dot(p) + self.offset
    }
}

/// Smoothness of every cell, `None` where undefined or excluded.
pub fn smoothness(scan: &OrganizedScan) -> Vec<Option<f64>> {
    let (rows, cols) = (scan.rows(), scan.cols());
    let mut out = vec![None; rows * cols];
    if cols < 2 * SMOOTHNESS_HALF_WINDOW + 1 {
        return out;
    }
    let h = SMOOTHNESS_HALF_WINDOW as isize;
    for r in 0..rows {
        'cell: for c in 0..cols {
            let pi = scan.get(r, c);
            if !pi.valid {
                continue;
            }
            let ri = pi.xyz.norm();
            if ri <= 0.0 {
                continue;
            }
            let at = |k: isize| scan.get(r, (c as isize + k).rem_euclid(cols as isize) as usize);
            let mut sum = Vec3::zeros();
            for k in -h..=h {
                if k == 0 {
                    continue;
                }
                let pj = at(k);
                if !pj.valid {
                    continue 'cell;
                }
                sum += pj.xyz - pi.xyz;
            }
            let prev = at(-1).xyz;
            let next = at(1).xyz;
            // occlusion boundary
            if (prev.norm() - ri).abs() > OCCLUSION_JUMP
                || (next.norm() - ri).abs() > OCCLUSION_JUMP
            {
                continue;
            }
            // beam nearly parallel to the surface: large steps on both sides
            let lim = 0.0002 * ri * ri;
            if (prev - pi.xyz).norm_squared() > lim && (next - pi.xyz).norm_squared() > lim {
                continue;
            }
            out[r * cols + c] = Some(sum.norm() / (2.0 * h as f64 * ri));
        }
    }
    out
}

/// Lowest-smoothness points in each azimuth sector, skipping masked cells.
pub fn extract_general_planes_masked(
    scan: &OrganizedScan,
    per_sector: usize,
    exclude: Option<&[bool]>,
) -> Vec<PlanePoint> {
    let cols = scan.cols();
    let smooth = smoothness(scan);
    let mut sectors: Vec<Vec<(f64, usize)>> = vec![Vec::new(); AZIMUTH_SECTORS];
    for (i, s) in smooth.iter().enumerate() {
        let Some(s) = s else { continue };
        if *s >= SMOOTHNESS_MAX || exclude.is_some_and(|m| m[i]) {
            continue;
        }
        let col = i % cols;
        sectors[col * AZIMUTH_SECTORS / cols].push((*s, i));
    }
    let mut out = Vec::new();
    for mut s in sectors {
        s.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        out.extend(s.into_iter().take(per_sector).map(|(_, i)| PlanePoint {
            position: scan.points()[i].xyz,
            kind: PlaneKind::General,
        }));
    }
    out
}

pub fn extract_general_planes(scan: &OrganizedScan, per_sector: usize) -> Vec<PlanePoint> {
    extract_general_planes_masked(scan, per_sector, None)
}

/// Least-squares plane through points: (upward unit normal, offset, rms).
pub fn fit_plane(points: &[Vec3]) -> Option<(Vec3, f64, f64)> {
    if points.len() < 3 {
        return None;
    }
    let n = points.len() as f64;
    let c = points.iter().sum::<Vec3>() / n;
    let mut cov = Matrix3::zeros();
    for p in points {
        let d = p - c;
        cov += d * d.transpose();
    }
    let eig = cov.symmetric_eigen();
    let (imin, _) = eig
        .eigenvalues
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.total_cmp(b.1))?;
    let mut normal: Vec3 = eig.eigenvectors.column(imin).into_owned();
    let len = normal.norm();
    if !(len > 0.0) {
        return None;
    }
    normal /= len;
    if normal.z < 0.0 {
        normal = -normal;
    }
    let offset = -normal.dot(&c);
    let rms = (eig.eigenvalues[imin].max(0.0) / n).sqrt();
    Some((normal, offset, rms))
}

fn tilt_ok(normal: &Vec3) -> bool {
    normal.z >= GROUND_MAX_TILT_DEG.to_radians().cos()
}

/// RANSAC ground segmentation over cells near the expected height.
///
/// Returns the model and the flat indices of the inlier cells.
pub fn segment_ground_indices(
    scan: &OrganizedScan,
    height_prior: f64,
    iterations: usize,
    seed: u64,
) -> Result<(GroundModel, Vec<usize>), PlaneError> {
    let cand: Vec<usize> = scan
        .points()
        .iter()
        .enumerate()
        .filter(|(_, p)| p.valid && (p.xyz.z - height_prior).abs() <= GROUND_BAND)
        .map(|(i, _)| i)
        .collect();
    if cand.len() < GROUND_MIN_CANDIDATES {
        return Err(PlaneError::NoGround(format!(
            "{} candidates near z = {height_prior}",
            cand.len()
        )));
    }
    let pts: Vec<Vec3> = cand.iter().map(|&i| scan.points()[i].xyz).collect();
    let count = |n: &Vec3, d: f64| {
        pts.iter()
            .filter(|p| (n.dot(p) + d).abs() <= GROUND_INLIER_DIST)
            .count()
    };

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best: Option<(Vec3, f64, usize)> = None;
    for _ in 0..iterations {
        let a = rng.random_range(0..pts.len());
        let b = rng.random_range(0..pts.len());
        let c = rng.random_range(0..pts.len());
        if a == b || b == c || a == c {
            continue;
        }
        let mut n = (pts[b] - pts[a]).cross(&(pts[c] - pts[a]));
        let len = n.norm();
        if len < 1e-9 {
            continue;
        }
        n /= len;
        if n.z < 0.0 {
            n = -n;
        }
        if !tilt_ok(&n) {
            continue;
        }
        let d = -n.dot(&pts[a]);
        let k = count(&n, d);
        if best.is_none_or(|(_, _, bk)| k > bk) {
            best = Some((n, d, k));
        }
    }
    let Some((mut n, mut d, k)) = best else {
        return Err(PlaneError::NoGround(
            "no sample within the tilt limit".into(),
        ));
    };
    // refine on the inliers, keep the refinement only if it does not lose support
    let inl: Vec<Vec3> = pts
        .iter()
        .copied()
        .filter(|p| (n.dot(p) + d).abs() <= GROUND_INLIER_DIST)
        .collect();
    if let Some((rn, rd, _)) = fit_plane(&inl) {
        if tilt_ok(&rn) && count(&rn, rd) >= k {
            (n, d) = (rn, rd);
        }
    }
    // the inlier band also catches the bases of walls; refit once more on the
    // points within three robust sigmas
    let res: Vec<f64> = inl.iter().map(|p| (n.dot(p) + d).abs()).collect();
    let mut sorted = res.clone();
    sorted.sort_by(f64::total_cmp);
    let cut = (3.0 * 1.4826 * sorted[sorted.len() / 2]).max(1e-6);
    let core: Vec<Vec3> = inl
        .iter()
        .zip(&res)
        .filter(|(_, r)| **r <= cut)
        .map(|(p, _)| *p)
        .collect();
    if let Some((rn, rd, _)) = fit_plane(&core) {
        if tilt_ok(&rn) {
            (n, d) = (rn, rd);
        }
    }
    let idx: Vec<usize> = cand
        .iter()
        .zip(&pts)
        .filter(|(_, p)| (n.dot(p) + d).abs() <= GROUND_INLIER_DIST)
        .map(|(i, _)| *i)
        .collect();
    Ok((
        GroundModel {
            normal: n,
            offset: d,
            inlier_count: idx.len(),
        },
        idx,
    ))
}

pub fn segment_ground(
    scan: &OrganizedScan,
    height_prior: f64,
    iterations: usize,
    seed: u64,
) -> Result<(GroundModel, Vec<PlanePoint>), PlaneError> {
    let (model, idx) = segment_ground_indices(scan, height_prior, iterations, seed)?;
    let pts = idx
        .into_iter()
        .map(|i| PlanePoint {
            position: scan.points()[i].xyz,
            kind: PlaneKind::Ground,
        })
        .collect();
    Ok((model, pts))
}

/// Centroid per occupied voxel, ordered by voxel key.
pub fn voxel_downsample(points: &[Vec3], voxel: f64) -> Vec<Vec3> {
    if !(voxel > 0.0) {
        return points.to_vec();
    }
    let mut cells: HashMap<(i64, i64, i64), (Vec3, usize)> = HashMap::new();
    for p in points {
        let key = (
            (p.x / voxel).floor() as i64,
            (p.y / voxel).floor() as i64,
            (p.z / voxel).floor() as i64,
        );
        let e = cells.entry(key).or_insert((Vec3::zeros(), 0));
        e.0 += p;
        e.1 += 1;
    }
    let mut keyed: Vec<_> = cells.into_iter().collect();
    keyed.sort_by_key(|(k, _)| *k);
    keyed.into_iter().map(|(_, (s, n))| s / n as f64).collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlaneParams {
    pub per_sector: usize,
    pub ground_voxel: f64,
    pub height_prior: f64,
    pub ransac_iterations: usize,
    pub ransac_seed: u64,
}

impl Default for PlaneParams {
    fn default() -> Self {
        Self {
            per_sector: 20,
            ground_voxel: 0.4,
            height_prior: -0.5,
            ransac_iterations: 100,
            ransac_seed: 42,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlaneExtraction {
    pub ground: Option<GroundModel>,
    /// Downsampled ground points followed by general plane points.
    pub points: Vec<PlanePoint>,
}

/// Ground first, then general planes from the remaining cells.
pub fn extract_planes(scan: &OrganizedScan, params: &PlaneParams) -> PlaneExtraction {
    let mut mask = vec![false; scan.len()];
    let mut points = Vec::new();
    let ground = match segment_ground_indices(
        scan,
        params.height_prior,
        params.ransac_iterations,
        params.ransac_seed,
    ) {
        Ok((model, idx)) => {
            let raw: Vec<Vec3> = idx.iter().map(|&i| scan.points()[i].xyz).collect();
            for i in idx {
                mask[i] = true;
            }
            // inliers within the band can include the base of walls, so the
            // centroids are snapped back onto the fitted plane
            points.extend(
                voxel_downsample(&raw, params.ground_voxel)
                    .into_iter()
                    .map(|p| PlanePoint {
                        position: p - model.normal * model.distance(&p),
                        kind: PlaneKind::Ground,
                    }),
            );
            Some(model)
        }
        Err(e) => {
            log::debug!("{e}");
            None
        }
    };
    points.extend(extract_general_planes_masked(
        scan,
        params.per_sector,
        Some(&mask),
    ));
    PlaneExtraction { ground, points }
}
