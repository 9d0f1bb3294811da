//! Synthetic textured worlds and a ray-cast spinning LiDAR.

use std::f64::consts::PI;
use std::path::Path;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::exec::Exec;
use crate::geometry::{Se3Pose, Vec3};
use crate::scan::{
    col_to_azimuth, write_scan, write_trajectory, OrganizedScan, ScanIoError, ScanPoint,
    TrajectoryRecord,
};

pub const INTENSITY_CAP: f64 = 512.0;
pub const FRAME_PERIOD: f64 = 0.1;

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

fn hash3(seed: u64, i: i64, j: i64) -> u64 {
    splitmix(splitmix(seed ^ splitmix(i as u64)) ^ (j as u64).wrapping_mul(0x2545_F491_4F6C_DD1D))
}

/// Uniform in [0, 1) from a hash.
fn unit(h: u64) -> f64 {
    (h >> 11) as f64 / (1u64 << 53) as f64
}

/// Intensity pattern over surface coordinates in meters.
#[derive(Debug, Clone, PartialEq)]
pub enum Texture {
    Constant(f64),
    Checker {
        cell: f64,
        lo: f64,
        hi: f64,
    },
    /// Two-octave smooth value noise.
    Noise {
        seed: u64,
        scale: f64,
        lo: f64,
        hi: f64,
    },
    /// Randomly placed flat rectangles, at most one per grid cell, over a base.
    Posters {
        seed: u64,
        cell: f64,
        fill: f64,
        lo: f64,
        hi: f64,
        base: Box<Texture>,
    },
}

fn smooth(t: f64) -> f64 {
    t * t * (3.0 - 2.0 * t)
}

fn value_noise(seed: u64, u: f64, v: f64) -> f64 {
    let (iu, iv) = (u.floor(), v.floor());
    let (fu, fv) = (smooth(u - iu), smooth(v - iv));
    let (i, j) = (iu as i64, iv as i64);
    let c = |a: i64, b: i64| unit(hash3(seed, a, b));
    let top = c(i, j) * (1.0 - fu) + c(i + 1, j) * fu;
    let bot = c(i, j + 1) * (1.0 - fu) + c(i + 1, j + 1) * fu;
    top * (1.0 - fv) + bot * fv
}

impl Texture {
    pub fn eval(&self, u: f64, v: f64) -> f64 {
        match self {
            Texture::Constant(c) => *c,
            Texture::Checker { cell, lo, hi } => {
                let k = (u / cell).floor() as i64 + (v / cell).floor() as i64;
                if k.rem_euclid(2) == 0 {
                    *lo
                } else {
                    *hi
                }
            }
            Texture::Noise {
                seed,
                scale,
                lo,
                hi,
            } => {
                let n = (2.0 * value_noise(*seed, u / scale, v / scale)
                    + value_noise(seed ^ 0xA5A5, 2.0 * u / scale, 2.0 * v / scale))
                    / 3.0;
                lo + (hi - lo) * n
            }
            Texture::Posters {
                seed,
                cell,
                fill,
                lo,
                hi,
                base,
            } => {
                let (i, j) = ((u / cell).floor() as i64, (v / cell).floor() as i64);
                let h = hash3(*seed, i, j);
                if unit(h) < *fill {
                    let r = |k: u64| unit(splitmix(h ^ k));
                    let x0 = cell * (0.05 + 0.3 * r(1));
                    let y0 = cell * (0.05 + 0.3 * r(2));
                    let w = cell * (0.25 + 0.35 * r(3));
                    let hgt = cell * (0.25 + 0.35 * r(4));
                    let (lu, lv) = (u - i as f64 * cell, v - j as f64 * cell);
                    if lu >= x0 && lu < x0 + w && lv >= y0 && lv < y0 + hgt {
                        // printed detail so that poster corners are told apart
                        let detail = value_noise(h, (lu - x0) / 0.12, (lv - y0) / 0.12);
                        return lo + (hi - lo) * r(5) * (0.55 + 0.45 * detail);
                    }
                }
                base.eval(u, v)
            }
        }
    }

    /// Low-contrast smooth noise, like bare concrete.
    pub fn concrete(seed: u64) -> Texture {
        Texture::Noise {
            seed,
            scale: 0.6,
            lo: 150.0,
            hi: 260.0,
        }
    }

    /// Posters over noise, the default surface finish.
    pub fn poster_wall(seed: u64) -> Texture {
        Texture::Posters {
            seed,
            cell: 0.8,
            fill: 0.7,
            lo: 30.0,
            hi: 500.0,
            base: Box::new(Texture::concrete(seed ^ 0x5EED)),
        }
    }
}

/// Texture frame of a planar patch.
#[derive(Debug, Clone, PartialEq)]
pub struct Surface {
    pub origin: Vec3,
    pub u_axis: Vec3,
    pub v_axis: Vec3,
    pub texture: Texture,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Triangle {
    pub a: Vec3,
    pub b: Vec3,
    pub c: Vec3,
    pub surface: usize,
}

impl Triangle {
    /// Möller–Trumbore; returns the ray parameter of the hit.
    pub fn intersect(&self, o: &Vec3, d: &Vec3) -> Option<f64> {
        let e1 = self.b - self.a;
        let e2 = self.c - self.a;
        let p = d.cross(&e2);
        let det = e1.dot(&p);
        if det.abs() < 1e-14 {
            return None;
        }
        let inv = 1.0 / det;
        let s = o - self.a;
        let u = s.dot(&p) * inv;
        if !(-1e-12..=1.0 + 1e-12).contains(&u) {
            return None;
        }
        let q = s.cross(&e1);
        let v = d.dot(&q) * inv;
        if v < -1e-12 || u + v > 1.0 + 1e-12 {
            return None;
        }
        Some(e2.dot(&q) * inv)
    }

    /// Euclidean distance from `p` to the closest point of the triangle.
    pub fn distance(&self, p: &Vec3) -> f64 {
        let (a, b, c) = (self.a, self.b, self.c);
        let ab = b - a;
        let ac = c - a;
        let ap = p - a;
        let d1 = ab.dot(&ap);
        let d2 = ac.dot(&ap);
        if d1 <= 0.0 && d2 <= 0.0 {
            return ap.norm();
        }
        let bp = p - b;
        let d3 = ab.dot(&bp);
        let d4 = ac.dot(&bp);
        if d3 >= 0.0 && d4 <= d3 {
            return bp.norm();
        }
        let vc = d1 * d4 - d3 * d2;
        if vc <= 0.0 && d1 >= 0.0 && d3 <= 0.0 {
            let t = d1 / (d1 - d3);
            return (p - (a + ab * t)).norm();
        }
        let cp = p - c;
        let d5 = ab.dot(&cp);
        let d6 = ac.dot(&cp);
        if d6 >= 0.0 && d5 <= d6 {
            return cp.norm();
        }
        let vb = d5 * d2 - d1 * d6;
        if vb <= 0.0 && d2 >= 0.0 && d6 <= 0.0 {
            let t = d2 / (d2 - d6);
            return (p - (a + ac * t)).norm();
        }
        let va = d3 * d6 - d5 * d4;
        if va <= 0.0 && (d4 - d3) >= 0.0 && (d5 - d6) >= 0.0 {
            let t = (d4 - d3) / ((d4 - d3) + (d5 - d6));
            return (p - (b + (c - b) * t)).norm();
        }
        let n = ab.cross(&ac).normalize();
        n.dot(&ap).abs()
    }
}

#[derive(Debug, Clone)]
enum BvhNode {
    Leaf {
        lo: Vec3,
        hi: Vec3,
        start: usize,
        end: usize,
    },
    Inner {
        lo: Vec3,
        hi: Vec3,
        left: usize,
        right: usize,
    },
}

/// Triangles, their texture frames and a bounding-volume hierarchy.
#[derive(Debug, Clone)]
pub struct World {
    pub surfaces: Vec<Surface>,
    triangles: Vec<Triangle>,
    bvh: Vec<BvhNode>,
    /// Lowest intensity any hit reports.
    pub ambient: f64,
}

impl Default for World {
    fn default() -> Self {
        Self::new()
    }
}

fn slab(o: &Vec3, inv: &Vec3, lo: &Vec3, hi: &Vec3, t_max: f64) -> Option<f64> {
    let mut t0: f64 = 0.0;
    let mut t1 = t_max;
    for k in 0..3 {
        let a = (lo[k] - o[k]) * inv[k];
        let b = (hi[k] - o[k]) * inv[k];
        let (near, far) = if a < b { (a, b) } else { (b, a) };
        // NaN from 0·inf means the ray lies in the slab plane; keep it
        if near.is_finite() || near == f64::NEG_INFINITY {
            t0 = t0.max(near);
        }
        if far.is_finite() || far == f64::INFINITY {
            t1 = t1.min(far);
        }
        if t0 > t1 {
            return None;
        }
    }
    Some(t0)
}

impl World {
    pub fn new() -> Self {
        Self {
            surfaces: Vec::new(),
            triangles: Vec::new(),
            bvh: Vec::new(),
            ambient: 5.0,
        }
    }

    pub fn triangles(&self) -> &[Triangle] {
        &self.triangles
    }

    /// Parallelogram `origin + s·u_edge + t·v_edge`, s, t ∈ [0, 1].
    pub fn add_quad(&mut self, origin: Vec3, u_edge: Vec3, v_edge: Vec3, texture: Texture) {
        let s = self.surfaces.len();
        self.surfaces.push(Surface {
            origin,
            u_axis: u_edge.normalize(),
            v_axis: v_edge.normalize(),
            texture,
        });
        let (a, b, c, d) = (
            origin,
            origin + u_edge,
            origin + u_edge + v_edge,
            origin + v_edge,
        );
        self.triangles.push(Triangle {
            a,
            b,
            c,
            surface: s,
        });
        self.triangles.push(Triangle {
            a,
            b: c,
            c: d,
            surface: s,
        });
        self.bvh.clear();
    }

    /// Axis-aligned box; `seed` varies the texture per face.
    pub fn add_box(&mut self, lo: Vec3, hi: Vec3, seed: u64, with_bottom: bool) {
        let e = hi - lo;
        let (x, y, z) = (
            Vec3::new(e.x, 0.0, 0.0),
            Vec3::new(0.0, e.y, 0.0),
            Vec3::new(0.0, 0.0, e.z),
        );
        self.add_quad(lo, x, z, Texture::poster_wall(seed));
        self.add_quad(lo + y, x, z, Texture::poster_wall(seed + 1));
        self.add_quad(lo, y, z, Texture::poster_wall(seed + 2));
        self.add_quad(lo + x, y, z, Texture::poster_wall(seed + 3));
        self.add_quad(lo + z, x, y, Texture::poster_wall(seed + 4));
        if with_bottom {
            self.add_quad(lo, x, y, Texture::poster_wall(seed + 5));
        }
    }

    /// Cube of half-size `half` centred at the origin.
    pub fn textured_box(half: f64) -> World {
        let mut w = World::new();
        w.add_box(Vec3::repeat(-half), Vec3::repeat(half), 11, true);
        w.build();
        w
    }

    /// Builds the hierarchy; call after the last `add_*`.
    pub fn build(&mut self) {
        self.bvh.clear();
        if self.triangles.is_empty() {
            return;
        }
        let n = self.triangles.len();
        self.build_node(0, n);
    }

    fn bounds(&self, start: usize, end: usize) -> (Vec3, Vec3) {
        let mut lo = Vec3::repeat(f64::INFINITY);
        let mut hi = Vec3::repeat(f64::NEG_INFINITY);
        for t in &self.triangles[start..end] {
            for p in [t.a, t.b, t.c] {
                lo = lo.inf(&p);
                hi = hi.sup(&p);
            }
        }
        (lo, hi)
    }

    fn build_node(&mut self, start: usize, end: usize) -> usize {
        let (lo, hi) = self.bounds(start, end);
        let idx = self.bvh.len();
        if end - start <= 4 {
            self.bvh.push(BvhNode::Leaf { lo, hi, start, end });
            return idx;
        }
        self.bvh.push(BvhNode::Leaf { lo, hi, start, end });
        let ext = hi - lo;
        let axis = if ext.x >= ext.y && ext.x >= ext.z {
            0
        } else if ext.y >= ext.z {
            1
        } else {
            2
        };
        let centroid = |t: &Triangle| (t.a[axis] + t.b[axis] + t.c[axis]) / 3.0;
        self.triangles[start..end].sort_by(|a, b| centroid(a).total_cmp(&centroid(b)));
        let mid = (start + end) / 2;
        let left = self.build_node(start, mid);
        let right = self.build_node(mid, end);
        self.bvh[idx] = BvhNode::Inner {
            lo,
            hi,
            left,
            right,
        };
        idx
    }

    /// Nearest hit along the ray within `(t_min, t_max]`.
    pub fn cast(&self, o: &Vec3, d: &Vec3, t_min: f64, t_max: f64) -> Option<(f64, usize)> {
        if self.bvh.is_empty() {
            return self.cast_brute(o, d, t_min, t_max);
        }
        let inv = Vec3::new(1.0 / d.x, 1.0 / d.y, 1.0 / d.z);
        let mut best: Option<(f64, usize)> = None;
        let mut stack = [0usize; 64];
        let mut sp = 1;
        while sp > 0 {
            sp -= 1;
            let node = &self.bvh[stack[sp]];
            let limit = best.map_or(t_max, |b| b.0);
            match node {
                BvhNode::Leaf { lo, hi, start, end } => {
                    if slab(o, &inv, lo, hi, limit).is_none() {
                        continue;
                    }
                    for (k, t) in self.triangles[*start..*end].iter().enumerate() {
                        if let Some(h) = t.intersect(o, d) {
                            if h > t_min && h <= t_max && best.is_none_or(|b| h < b.0) {
                                best = Some((h, start + k));
                            }
                        }
                    }
                }
                BvhNode::Inner {
                    lo,
                    hi,
                    left,
                    right,
                } => {
                    if slab(o, &inv, lo, hi, limit).is_some() && sp + 2 <= stack.len() {
                        stack[sp] = *right;
                        stack[sp + 1] = *left;
                        sp += 2;
                    }
                }
            }
        }
        best
    }

    fn cast_brute(&self, o: &Vec3, d: &Vec3, t_min: f64, t_max: f64) -> Option<(f64, usize)> {
        let mut best: Option<(f64, usize)> = None;
        for (k, t) in self.triangles.iter().enumerate() {
            if let Some(h) = t.intersect(o, d) {
                if h > t_min && h <= t_max && best.is_none_or(|b| h < b.0) {
                    best = Some((h, k));
                }
            }
        }
        best
    }

    pub fn intensity_at(&self, tri: usize, p: &Vec3) -> f64 {
        let s = &self.surfaces[self.triangles[tri].surface];
        let rel = p - s.origin;
        s.texture
            .eval(rel.dot(&s.u_axis), rel.dot(&s.v_axis))
            .max(self.ambient)
            .clamp(0.0, INTENSITY_CAP)
    }

    /// Distance from `p` to the nearest triangle.
    pub fn distance_to_surface(&self, p: &Vec3) -> f64 {
        self.triangles
            .iter()
            .map(|t| t.distance(p))
            .fold(f64::INFINITY, f64::min)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SensorModel {
    pub rows: usize,
    pub cols: usize,
    pub fov_up_deg: f64,
    pub fov_down_deg: f64,
    pub range_sigma: f64,
    pub intensity_sigma: f64,
    pub min_range: f64,
    pub max_range: f64,
}

impl Default for SensorModel {
    fn default() -> Self {
        Self {
            rows: 64,
            cols: 1024,
            fov_up_deg: 22.5,
            fov_down_deg: -22.5,
            range_sigma: 0.01,
            intensity_sigma: 2.0,
            min_range: 0.3,
            max_range: 50.0,
        }
    }
}

impl SensorModel {
    pub fn noiseless() -> Self {
        Self {
            range_sigma: 0.0,
            intensity_sigma: 0.0,
            ..Default::default()
        }
    }

    /// Elevation of a row; row 0 looks highest.
    pub fn elevation(&self, row: usize) -> f64 {
        let span = self.fov_up_deg - self.fov_down_deg;
        let step = if self.rows > 1 {
            span / (self.rows - 1) as f64
        } else {
            0.0
        };
        (self.fov_up_deg - step * row as f64).to_radians()
    }

    /// Unit beam direction in the sensor frame.
    pub fn beam(&self, row: usize, col: usize) -> Vec3 {
        let el = self.elevation(row);
        let az = col_to_azimuth(col, self.cols);
        Vec3::new(el.cos() * az.cos(), el.cos() * az.sin(), el.sin())
    }
}

/// Casts every beam from `pose`. Noise streams are seeded per row, so the
/// result does not depend on `exec`.
pub fn render_scan_with(
    world: &World,
    sensor: &SensorModel,
    pose: &Se3Pose,
    seed: u64,
    exec: Exec,
) -> OrganizedScan {
    let rot = pose.rotation_matrix();
    let origin = *pose.translation();
    let rows: Vec<Vec<ScanPoint>> = exec.map_range(sensor.rows, |r| {
        let mut rng = ChaCha8Rng::seed_from_u64(splitmix(seed ^ splitmix(r as u64 + 1)));
        let rn = Normal::new(0.0, sensor.range_sigma.max(0.0)).unwrap();
        let inn = Normal::new(0.0, sensor.intensity_sigma.max(0.0)).unwrap();
        (0..sensor.cols)
            .map(|c| {
                let d = sensor.beam(r, c);
                let dw = rot * d;
                let Some((t, tri)) = world.cast(&origin, &dw, sensor.min_range, sensor.max_range)
                else {
                    return ScanPoint::INVALID;
                };
                let hit = origin + dw * t;
                let mut range = t;
                let mut intensity = world.intensity_at(tri, &hit);
                if sensor.range_sigma > 0.0 {
                    range += rn.sample(&mut rng);
                }
                if sensor.intensity_sigma > 0.0 {
                    intensity = (intensity + inn.sample(&mut rng)).clamp(0.0, INTENSITY_CAP);
                }
                ScanPoint::new(d * range, intensity)
            })
            .collect()
    });
    let points: Vec<ScanPoint> = rows.into_iter().flatten().collect();
    OrganizedScan::from_points(sensor.rows, sensor.cols, 0.0, points).expect("grid size matches")
}

pub fn render_scan(
    world: &World,
    sensor: &SensorModel,
    pose: &Se3Pose,
    seed: u64,
) -> OrganizedScan {
    render_scan_with(world, sensor, pose, seed, Exec::default())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scenario {
    Corridor,
    Loop,
    Slope,
    Parking,
}

impl FromStr for Scenario {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "corridor" => Ok(Scenario::Corridor),
            "loop" => Ok(Scenario::Loop),
            "slope" => Ok(Scenario::Slope),
            "parking" => Ok(Scenario::Parking),
            _ => Err(format!(
                "unknown scenario '{s}' (corridor, loop, slope, parking)"
            )),
        }
    }
}

pub const CORRIDOR_HALF_WIDTH: f64 = 1.5;
pub const FLOOR_Z: f64 = -0.5;

pub fn corridor_world() -> World {
    let mut w = World::new();
    let (x0, len, h) = (-30.0, 90.0, 3.0);
    let hw = CORRIDOR_HALF_WIDTH;
    w.add_quad(
        Vec3::new(x0, hw, FLOOR_Z),
        Vec3::new(len, 0.0, 0.0),
        Vec3::new(0.0, 0.0, h),
        Texture::poster_wall(101),
    );
    w.add_quad(
        Vec3::new(x0, -hw, FLOOR_Z),
        Vec3::new(len, 0.0, 0.0),
        Vec3::new(0.0, 0.0, h),
        Texture::poster_wall(202),
    );
    w.add_quad(
        Vec3::new(x0, -hw, FLOOR_Z),
        Vec3::new(len, 0.0, 0.0),
        Vec3::new(0.0, 2.0 * hw, 0.0),
        Texture::poster_wall(303),
    );
    w.build();
    w
}

/// Rounded rectangle traced by the loop scenario: corners (0,0) and (19,11),
/// corner radius 2, starting mid-bottom heading +x, counter-clockwise.
pub struct LoopPath;

impl LoopPath {
    pub const W: f64 = 19.0;
    pub const H: f64 = 11.0;
    pub const R: f64 = 2.0;

    pub fn length() -> f64 {
        2.0 * (Self::W - 2.0 * Self::R) + 2.0 * (Self::H - 2.0 * Self::R) + 2.0 * PI * Self::R
    }

    /// Position and heading at arc length `s` from the start.
    pub fn at(s: f64) -> (f64, f64, f64) {
        let (w, h, r) = (Self::W, Self::H, Self::R);
        let mut s = s.rem_euclid(Self::length());
        let q = PI * r / 2.0;
        // bottom right half, then the rest of the loop in order
        let segs: [(f64, u8); 9] = [
            (w / 2.0 - r, 0),
            (q, 1),
            (h - 2.0 * r, 2),
            (q, 3),
            (w - 2.0 * r, 4),
            (q, 5),
            (h - 2.0 * r, 6),
            (q, 7),
            (w / 2.0 - r, 8),
        ];
        for (len, id) in segs {
            if s <= len || id == 8 {
                return match id {
                    0 => (w / 2.0 + s, 0.0, 0.0),
                    1 => Self::arc(w - r, r, -PI / 2.0, s / r),
                    2 => (w, r + s, PI / 2.0),
                    3 => Self::arc(w - r, h - r, 0.0, s / r),
                    4 => (w - r - s, h, PI),
                    5 => Self::arc(r, h - r, PI / 2.0, s / r),
                    6 => (0.0, h - r - s, -PI / 2.0),
                    7 => Self::arc(r, r, PI, s / r),
                    _ => (r + s, 0.0, 0.0),
                };
            }
            s -= len;
        }
        unreachable!()
    }

    fn arc(cx: f64, cy: f64, start: f64, a: f64) -> (f64, f64, f64) {
        let ang = start + a;
        (
            cx + Self::R * ang.cos(),
            cy + Self::R * ang.sin(),
            ang + PI / 2.0,
        )
    }
}

pub fn loop_world() -> World {
    let mut w = World::new();
    let h = 3.0;
    let z = Vec3::new(0.0, 0.0, h);
    let (ox0, oy0, ox1, oy1) = (-3.0, -3.0, 22.0, 14.0);
    let (ix0, iy0, ix1, iy1) = (3.0, 3.0, 16.0, 8.0);
    // outer walls
    w.add_quad(
        Vec3::new(ox0, oy0, FLOOR_Z),
        Vec3::new(ox1 - ox0, 0.0, 0.0),
        z,
        Texture::poster_wall(11),
    );
    w.add_quad(
        Vec3::new(ox0, oy1, FLOOR_Z),
        Vec3::new(ox1 - ox0, 0.0, 0.0),
        z,
        Texture::poster_wall(12),
    );
    w.add_quad(
        Vec3::new(ox0, oy0, FLOOR_Z),
        Vec3::new(0.0, oy1 - oy0, 0.0),
        z,
        Texture::poster_wall(13),
    );
    w.add_quad(
        Vec3::new(ox1, oy0, FLOOR_Z),
        Vec3::new(0.0, oy1 - oy0, 0.0),
        z,
        Texture::poster_wall(14),
    );
    // inner block
    w.add_box(
        Vec3::new(ix0, iy0, FLOOR_Z),
        Vec3::new(ix1, iy1, FLOOR_Z + h),
        21,
        false,
    );
    w.add_quad(
        Vec3::new(ox0, oy0, FLOOR_Z),
        Vec3::new(ox1 - ox0, 0.0, 0.0),
        Vec3::new(0.0, oy1 - oy0, 0.0),
        Texture::concrete(31),
    );
    w.build();
    w
}

pub const SLOPE_DEG: f64 = 10.0;

pub fn slope_world() -> World {
    let mut w = World::new();
    let th = SLOPE_DEG.to_radians();
    let along = Vec3::new(th.cos(), 0.0, th.sin());
    let normal = Vec3::new(-th.sin(), 0.0, th.cos());
    let start = along * -20.0 + normal * FLOOR_Z + Vec3::new(0.0, -15.0, 0.0);
    w.add_quad(
        start,
        along * 90.0,
        Vec3::new(0.0, 30.0, 0.0),
        Texture::poster_wall(41),
    );
    for k in 0..12 {
        let s = -10.0 + k as f64 * 7.0;
        let side = if k % 2 == 0 { 5.0 } else { -7.0 };
        let base = along * s + normal * FLOOR_Z + Vec3::new(0.0, side, 0.0);
        w.add_box(
            base - Vec3::new(0.0, 0.0, 0.5),
            base + Vec3::new(2.0, 2.0, 2.0),
            50 + k * 7,
            false,
        );
    }
    w.build();
    w
}

pub fn parking_world() -> World {
    let mut w = World::new();
    w.add_quad(
        Vec3::new(-40.0, -30.0, FLOOR_Z),
        Vec3::new(100.0, 0.0, 0.0),
        Vec3::new(0.0, 60.0, 0.0),
        Texture::poster_wall(61),
    );
    let mut k = 0u64;
    for side in [-1.0f64, 1.0] {
        for slot in 0..24 {
            k += 1;
            if unit(hash3(77, slot, side as i64)) < 0.3 {
                continue;
            }
            let x = -20.0 + slot as f64 * 3.0;
            let y0 = if side > 0.0 { 3.5 } else { -8.0 };
            w.add_box(
                Vec3::new(x, y0, FLOOR_Z),
                Vec3::new(x + 1.8, y0 + 4.5, FLOOR_Z + 1.5),
                100 + k * 7,
                false,
            );
        }
    }
    w.build();
    w
}

pub fn world_for(scenario: Scenario) -> World {
    match scenario {
        Scenario::Corridor => corridor_world(),
        Scenario::Loop => loop_world(),
        Scenario::Slope => slope_world(),
        Scenario::Parking => parking_world(),
    }
}

/// Ground-truth sensor poses. The loop scenario always closes on itself,
/// spreading `steps` poses evenly over the circuit; `step_size` only applies
/// to the other scenarios.
pub fn trajectory_for(scenario: Scenario, steps: usize, step_size: f64) -> Vec<Se3Pose> {
    (0..steps)
        .map(|i| match scenario {
            Scenario::Corridor | Scenario::Parking => {
                Se3Pose::from_translation(Vec3::new(i as f64 * step_size, 0.0, 0.0))
            }
            Scenario::Loop => {
                let s = if steps > 1 {
                    LoopPath::length() * i as f64 / (steps - 1) as f64
                } else {
                    0.0
                };
                let s = if i + 1 == steps { 0.0 } else { s };
                let (x, y, yaw) = LoopPath::at(s);
                Se3Pose::from_translation(Vec3::new(x, y, 0.0)).compose(&Se3Pose::rot_z(yaw))
            }
            Scenario::Slope => {
                let th = SLOPE_DEG.to_radians();
                let s = i as f64 * step_size;
                Se3Pose::from_translation(Vec3::new(s * th.cos(), 0.0, s * th.sin()))
                    .compose(&Se3Pose::from_axis_angle(&Vec3::y(), -th))
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SequenceOptions {
    pub sensor: SensorModel,
    pub seed: u64,
    pub exec: Exec,
}

impl Default for SequenceOptions {
    fn default() -> Self {
        Self {
            sensor: SensorModel::default(),
            seed: 1,
            exec: Exec::default(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Sequence {
    pub scans: Vec<OrganizedScan>,
    pub truth: Vec<TrajectoryRecord>,
}

/// Renders a sequence lazily, one scan and its ground-truth record at a time.
pub fn stream_sequence(
    scenario: Scenario,
    steps: usize,
    step_size: f64,
    opts: SequenceOptions,
) -> impl Iterator<Item = (OrganizedScan, TrajectoryRecord)> + Send {
    let world = world_for(scenario);
    let poses = trajectory_for(scenario, steps.max(2), step_size);
    poses.into_iter().enumerate().map(move |(i, p)| {
        let t = i as f64 * FRAME_PERIOD;
        let mut s = render_scan_with(
            &world,
            &opts.sensor,
            &p,
            opts.seed.wrapping_add(i as u64),
            opts.exec,
        );
        s.timestamp = t;
        (s, TrajectoryRecord::new(t, p))
    })
}

pub fn make_sequence_with(
    scenario: Scenario,
    steps: usize,
    step_size: f64,
    opts: &SequenceOptions,
) -> Sequence {
    let (scans, truth) = stream_sequence(scenario, steps, step_size, *opts).unzip();
    Sequence { scans, truth }
}

pub fn make_sequence(scenario: Scenario, steps: usize, step_size: f64) -> Sequence {
    make_sequence_with(scenario, steps, step_size, &SequenceOptions::default())
}

/// Writes `scan_NNNNNN.oscn` files and `ground_truth.txt` into `dir`.
pub fn write_sequence(seq: &Sequence, dir: impl AsRef<Path>) -> Result<(), ScanIoError> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    for (i, s) in seq.scans.iter().enumerate() {
        write_scan(s, dir.join(format!("scan_{i:06}.oscn")))?;
    }
    write_trajectory(&seq.truth, dir.join("ground_truth.txt"))
}
