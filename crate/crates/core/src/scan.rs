//! Organized scans and trajectories on disk.
//!
//! Scan file layout (little-endian):
//!
//! ```text
//! "OSCN" | u32 version = 1 | u32 rows | u32 cols | f64 timestamp
//! rows × cols × { f32 x, f32 y, f32 z, f32 intensity, u8 valid }
//! ```
//!
//! Trajectory files hold one `timestamp tx ty tz qx qy qz qw` line per pose.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use thiserror::Error;

use crate::geometry::{Se3Pose, Vec3};

pub const SCAN_MAGIC: &[u8; 4] = b"OSCN";
pub const SCAN_VERSION: u32 = 1;
const HEADER_LEN: usize = 4 + 4 + 4 + 4 + 8;
const RECORD_LEN: usize = 17;

#[derive(Debug, Error)]
pub enum ScanIoError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("format error: {0}")]
    Format(String),
    #[error("invalid input: {0}")]
    InvalidInput(String),
}

/// One cell of an organized scan.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ScanPoint {
    pub xyz: Vec3,
    pub intensity: f64,
    pub valid: bool,
}

impl ScanPoint {
    pub const INVALID: ScanPoint = ScanPoint {
        xyz: Vec3::new(0.0, 0.0, 0.0),
        intensity: 0.0,
        valid: false,
    };

    pub fn new(xyz: Vec3, intensity: f64) -> Self {
        Self {
            xyz,
            intensity,
            valid: true,
        }
    }

    pub fn range(&self) -> f64 {
        self.xyz.norm()
    }
}

/// One sensor revolution on its ring × azimuth grid, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct OrganizedScan {
    rows: usize,
    cols: usize,
    pub timestamp: f64,
    points: Vec<ScanPoint>,
}

impl OrganizedScan {
    /// An all-invalid scan.
    pub fn new(rows: usize, cols: usize, timestamp: f64) -> Self {
        Self {
            rows,
            cols,
            timestamp,
            points: vec![ScanPoint::INVALID; rows * cols],
        }
    }

    /// Builds a scan from a row-major cell list, sanitizing invalid cells.
    pub fn from_points(
        rows: usize,
        cols: usize,
        timestamp: f64,
        points: Vec<ScanPoint>,
    ) -> Result<Self, ScanIoError> {
        if points.len() != rows * cols {
            return Err(ScanIoError::InvalidInput(format!(
                "expected {} cells, got {}",
                rows * cols,
                points.len()
            )));
        }
        let mut scan = Self {
            rows,
            cols,
            timestamp,
            points,
        };
        scan.sanitize();
        Ok(scan)
    }

    fn sanitize(&mut self) {
        for p in &mut self.points {
            let ok = p.valid
                && p.xyz.iter().all(|v| v.is_finite())
                && p.intensity.is_finite()
                && p.intensity >= 0.0
                && p.xyz.norm_squared() > 0.0;
            if !ok {
                *p = ScanPoint::INVALID;
            }
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn index(&self, row: usize, col: usize) -> usize {
        row * self.cols + col
    }

    pub fn get(&self, row: usize, col: usize) -> &ScanPoint {
        &self.points[row * self.cols + col]
    }

    /// Stores a return; non-finite or zero-range returns are stored invalid.
    pub fn set(&mut self, row: usize, col: usize, point: ScanPoint) {
        let idx = self.index(row, col);
        self.points[idx] = point;
        if point.valid {
            let p = &mut self.points[idx];
            if !(p.xyz.iter().all(|v| v.is_finite())
                && p.intensity.is_finite()
                && p.intensity >= 0.0
                && p.xyz.norm_squared() > 0.0)
            {
                *p = ScanPoint::INVALID;
            }
        } else {
            self.points[idx] = ScanPoint::INVALID;
        }
    }

    pub fn points(&self) -> &[ScanPoint] {
        &self.points
    }

    pub fn valid_count(&self) -> usize {
        self.points.iter().filter(|p| p.valid).count()
    }

    pub fn valid_points(&self) -> impl Iterator<Item = Vec3> + '_ {
        self.points.iter().filter(|p| p.valid).map(|p| p.xyz)
    }

    /// Rounds every coordinate and intensity to `f32`, as stored on disk.
    pub fn quantized(&self) -> OrganizedScan {
        let mut out = self.clone();
        for p in &mut out.points {
            p.xyz = p.xyz.map(|v| v as f32 as f64);
            p.intensity = p.intensity as f32 as f64;
        }
        out.sanitize();
        out
    }
}

pub fn write_scan(scan: &OrganizedScan, path: impl AsRef<Path>) -> Result<(), ScanIoError> {
    let mut buf = Vec::with_capacity(HEADER_LEN + scan.len() * RECORD_LEN);
    buf.extend_from_slice(SCAN_MAGIC);
    buf.extend_from_slice(&SCAN_VERSION.to_le_bytes());
    buf.extend_from_slice(&(scan.rows as u32).to_le_bytes());
    buf.extend_from_slice(&(scan.cols as u32).to_le_bytes());
    buf.extend_from_slice(&scan.timestamp.to_le_bytes());
    for p in scan.points() {
        for v in [p.xyz.x, p.xyz.y, p.xyz.z, p.intensity] {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
        buf.push(p.valid as u8);
    }
    let mut f = BufWriter::new(File::create(path)?);
    f.write_all(&buf)?;
    f.flush()?;
    Ok(())
}

pub fn read_scan(path: impl AsRef<Path>) -> Result<OrganizedScan, ScanIoError> {
    let mut bytes = Vec::new();
    File::open(path)?.read_to_end(&mut bytes)?;
    decode_scan(&bytes)
}

pub fn decode_scan(bytes: &[u8]) -> Result<OrganizedScan, ScanIoError> {
    if bytes.len() < HEADER_LEN {
        return Err(ScanIoError::Format("file shorter than header".into()));
    }
    if &bytes[0..4] != SCAN_MAGIC {
        return Err(ScanIoError::Format("bad magic".into()));
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
    let f32_at = |o: usize| f32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
    let version = u32_at(4);
    if version != SCAN_VERSION {
        return Err(ScanIoError::Format(format!(
            "unsupported version {version}"
        )));
    }
    let rows = u32_at(8) as usize;
    let cols = u32_at(12) as usize;
    let timestamp = f64::from_le_bytes(bytes[16..24].try_into().unwrap());
    if rows == 0 || cols == 0 {
        return Err(ScanIoError::Format(format!("empty shape {rows}x{cols}")));
    }
    let expected = rows
        .checked_mul(cols)
        .and_then(|n| n.checked_mul(RECORD_LEN))
        .and_then(|n| n.checked_add(HEADER_LEN))
        .ok_or_else(|| ScanIoError::Format("shape overflow".into()))?;
    if bytes.len() != expected {
        return Err(ScanIoError::Format(format!(
            "header says {rows}x{cols} ({expected} bytes) but file has {} bytes",
            bytes.len()
        )));
    }
    let mut points = Vec::with_capacity(rows * cols);
    for i in 0..rows * cols {
        let o = HEADER_LEN + i * RECORD_LEN;
        let x = f32_at(o) as f64;
        let y = f32_at(o + 4) as f64;
        let z = f32_at(o + 8) as f64;
        let intensity = f32_at(o + 12) as f64;
        let valid = bytes[o + 16] != 0;
        points.push(ScanPoint {
            xyz: Vec3::new(x, y, z),
            intensity,
            valid,
        });
    }
    OrganizedScan::from_points(rows, cols, timestamp, points)
}

/// Imports `x y z intensity ring` text rows into an organized grid.
///
/// The column comes from the azimuth with the same convention as the
/// simulator: column `c` is centred on azimuth `π − 2π(c + ½)/cols`, so
/// the forward direction sits in the middle of the image. When two returns
/// fall into one cell the nearer one is kept.
pub fn import_ascii(
    text: &str,
    rows: usize,
    cols: usize,
    timestamp: f64,
) -> Result<OrganizedScan, ScanIoError> {
    let mut scan = OrganizedScan::new(rows, cols, timestamp);
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() < 5 {
            return Err(ScanIoError::Format(format!(
                "line {}: expected `x y z intensity ring`",
                lineno + 1
            )));
        }
        let num = |s: &str| {
            s.parse::<f64>()
                .map_err(|_| ScanIoError::Format(format!("line {}: bad number `{s}`", lineno + 1)))
        };
        let (x, y, z, intensity) = (
            num(fields[0])?,
            num(fields[1])?,
            num(fields[2])?,
            num(fields[3])?,
        );
        let ring: usize = fields[4].parse().map_err(|_| {
            ScanIoError::Format(format!("line {}: bad ring `{}`", lineno + 1, fields[4]))
        })?;
        if ring >= rows {
            return Err(ScanIoError::Format(format!(
                "line {}: ring {ring} out of range 0..{rows}",
                lineno + 1
            )));
        }
        let col = azimuth_to_col(y.atan2(x), cols);
        let p = ScanPoint::new(Vec3::new(x, y, z), intensity);
        let cur = scan.get(ring, col);
        if !cur.valid || p.range() < cur.range() {
            scan.set(ring, col, p);
        }
    }
    Ok(scan)
}

/// Column index of an azimuth (radians), see [`import_ascii`].
pub fn azimuth_to_col(azimuth: f64, cols: usize) -> usize {
    let u = (std::f64::consts::PI - azimuth) / std::f64::consts::TAU;
    let c = (u * cols as f64).floor() as i64;
    c.rem_euclid(cols as i64) as usize
}

pub fn col_to_azimuth(col: usize, cols: usize) -> f64 {
    std::f64::consts::PI - std::f64::consts::TAU * (col as f64 + 0.5) / cols as f64
}

/// A timestamped pose.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrajectoryRecord {
    pub timestamp: f64,
    pub pose: Se3Pose,
}

impl TrajectoryRecord {
    pub fn new(timestamp: f64, pose: Se3Pose) -> Self {
        Self { timestamp, pose }
    }
}

/// `%.9g`-style formatting: nine significant digits, trailing zeros trimmed.
pub fn format_sig9(x: f64) -> String {
    if x == 0.0 {
        return "0".into();
    }
    if !x.is_finite() {
        return format!("{x}");
    }
    let sci = format!("{:.8e}", x);
    let (mantissa, exp) = sci.split_once('e').expect("exponent");
    let exp: i32 = exp.parse().expect("exponent digits");
    if (-5..9).contains(&exp) {
        let decimals = (8 - exp).max(0) as usize;
        trim_zeros(format!("{:.*}", decimals, x))
    } else {
        format!("{}e{}", trim_zeros(mantissa.to_string()), exp)
    }
}

fn trim_zeros(s: String) -> String {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    } else {
        s
    }
}

pub fn format_trajectory_line(r: &TrajectoryRecord) -> String {
    let t = r.pose.translation();
    let q = r.pose.rotation().coords; // (i, j, k, w)
    format!(
        "{:.9} {} {} {} {} {} {} {}",
        r.timestamp,
        format_sig9(t.x),
        format_sig9(t.y),
        format_sig9(t.z),
        format_sig9(q[0]),
        format_sig9(q[1]),
        format_sig9(q[2]),
        format_sig9(q[3])
    )
}

pub fn write_trajectory(
    records: &[TrajectoryRecord],
    path: impl AsRef<Path>,
) -> Result<(), ScanIoError> {
    for w in records.windows(2) {
        if !(w[1].timestamp > w[0].timestamp) {
            return Err(ScanIoError::InvalidInput(format!(
                "timestamps not strictly increasing: {} then {}",
                w[0].timestamp, w[1].timestamp
            )));
        }
    }
    let mut f = BufWriter::new(File::create(path)?);
    for r in records {
        writeln!(f, "{}", format_trajectory_line(r))?;
    }
    f.flush()?;
    Ok(())
}

pub fn read_trajectory(path: impl AsRef<Path>) -> Result<Vec<TrajectoryRecord>, ScanIoError> {
    let f = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (lineno, line) in f.lines().enumerate() {
        let line = line?;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let vals: Result<Vec<f64>, _> = line.split_whitespace().map(str::parse::<f64>).collect();
        let vals = vals.map_err(|e| ScanIoError::Format(format!("line {}: {e}", lineno + 1)))?;
        if vals.len() != 8 {
            return Err(ScanIoError::Format(format!(
                "line {}: expected 8 fields, got {}",
                lineno + 1,
                vals.len()
            )));
        }
        let pose = Se3Pose::from_xyz_quat(
            [vals[1], vals[2], vals[3]],
            [vals[4], vals[5], vals[6], vals[7]],
        );
        out.push(TrajectoryRecord::new(vals[0], pose));
    }
    Ok(out)
}
