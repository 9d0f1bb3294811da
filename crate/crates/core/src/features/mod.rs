//! Corner features on intensity images, their binary descriptors, and
//! descriptor matching between frames.

pub mod brief;
pub mod fast;
pub mod matching;

pub use brief::{describe, Descriptor, DescriptorExtractor, DESCRIPTOR_BITS};
pub use matching::{match_descriptors, score_from_hamming, MatchPair, MatchParams};

use crate::exec::Exec;
use crate::geometry::Vec3;
use crate::image::{project, ImageError, IntensityImage, NormalizationParams};
use crate::scan::OrganizedScan;

pub const COLUMN_SECTORS: usize = 8;

#[derive(Debug, Clone, PartialEq)]
pub struct Feature {
    pub row: usize,
    pub col: usize,
    pub response: f64,
    pub descriptor: Descriptor,
    /// Sensor-frame position of the return behind the pixel.
    pub point3d: Vec3,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DetectorParams {
    pub threshold: u8,
    pub cap: usize,
    /// Corners whose return is farther than this are dropped.
    pub max_range: f64,
    pub exec: Exec,
}

impl Default for DetectorParams {
    fn default() -> Self {
        Self {
            threshold: 20,
            cap: 200,
            max_range: f64::INFINITY,
            exec: Exec::default(),
        }
    }
}

/// Picks up to `cap` candidates: each of the column sectors first gets an
/// equal quota of its strongest corners, unused slots go to the strongest
/// leftovers anywhere. Result is sorted by descending response.
fn select_bucketed(
    mut candidates: Vec<fast::Corner>,
    cols: usize,
    cap: usize,
) -> Vec<fast::Corner> {
    let order = |a: &fast::Corner, b: &fast::Corner| {
        b.response
            .total_cmp(&a.response)
            .then(a.row.cmp(&b.row))
            .then(a.col.cmp(&b.col))
    };
    candidates.sort_by(order);
    if candidates.len() <= cap {
        return candidates;
    }
    let quota = cap / COLUMN_SECTORS;
    let mut taken = [0usize; COLUMN_SECTORS];
    let mut chosen = Vec::with_capacity(cap);
    let mut leftover = Vec::new();
    for c in candidates {
        let sector = c.col * COLUMN_SECTORS / cols;
        if taken[sector] < quota {
            taken[sector] += 1;
            chosen.push(c);
        } else {
            leftover.push(c);
        }
    }
    let room = cap - chosen.len();
    chosen.extend(leftover.into_iter().take(room));
    chosen.sort_by(order);
    chosen
}

/// Detects, describes and back-projects features. Corners on pixels without
/// a 3D return are discarded before selection.
/// Every cell within the FAST radius has a return. Corners touching missing
/// returns outline the sensor's range limits, not surface texture, and stay
/// fixed in the sensor frame as it moves.
fn support_is_valid(img: &IntensityImage, scan: &OrganizedScan, row: usize, col: usize) -> bool {
    let (rows, cols) = (img.rows() as isize, img.cols() as isize);
    (-3..=3isize).all(|dr| {
        let r = row as isize + dr;
        r >= 0
            && r < rows
            && (-3..=3isize).all(|dc| {
                let c = (col as isize + dc).rem_euclid(cols) as usize;
                img.index_at(r as usize, c)
                    .is_some_and(|i| scan.points()[i].valid)
            })
    })
}

pub fn detect_with(
    img: &IntensityImage,
    scan: &OrganizedScan,
    params: &DetectorParams,
) -> Vec<Feature> {
    let corners: Vec<fast::Corner> = fast::detect_corners(img, params.threshold, params.exec)
        .into_iter()
        .filter(|c| support_is_valid(img, scan, c.row, c.col))
        .filter(|c| {
            img.index_at(c.row, c.col)
                .is_some_and(|i| scan.points()[i].range() <= params.max_range)
        })
        .collect();
    let selected = select_bucketed(corners, img.cols(), params.cap);
    if selected.is_empty() {
        return Vec::new();
    }
    let extractor = DescriptorExtractor::new(img);
    selected
        .into_iter()
        .map(|c| {
            let idx = img.index_at(c.row, c.col).expect("filtered above");
            Feature {
                row: c.row,
                col: c.col,
                response: c.response,
                descriptor: extractor.describe(c.row, c.col),
                point3d: scan.points()[idx].xyz,
            }
        })
        .collect()
}

pub fn detect(img: &IntensityImage, scan: &OrganizedScan, cap: usize) -> Vec<Feature> {
    detect_with(
        img,
        scan,
        &DetectorParams {
            cap,
            ..Default::default()
        },
    )
}

pub fn match_features(prev: &[Feature], curr: &[Feature], params: &MatchParams) -> Vec<MatchPair> {
    let a: Vec<Descriptor> = prev.iter().map(|f| f.descriptor).collect();
    let b: Vec<Descriptor> = curr.iter().map(|f| f.descriptor).collect();
    match_descriptors(&a, &b, params)
}

/// Everything the front end keeps about one scan.
#[derive(Debug, Clone)]
pub struct IntensityFrame {
    pub timestamp: f64,
    pub image: IntensityImage,
    pub features: Vec<Feature>,
}

impl IntensityFrame {
    pub fn build(
        scan: &OrganizedScan,
        norm: &NormalizationParams,
        detector: &DetectorParams,
    ) -> Result<Self, ImageError> {
        let image = project(scan, norm)?;
        let features = detect_with(&image, scan, detector);
        Ok(Self {
            timestamp: scan.timestamp,
            image,
            features,
        })
    }

    pub fn descriptors(&self) -> Vec<Descriptor> {
        self.features.iter().map(|f| f.descriptor).collect()
    }

    /// One line per feature: `row col response hex-descriptor x y z`.
    pub fn dump(&self) -> String {
        let mut s = String::new();
        for f in &self.features {
            s.push_str(&format!(
                "{} {} {} {} {} {} {}\n",
                f.row,
                f.col,
                f.response,
                f.descriptor.to_hex(),
                f.point3d.x,
                f.point3d.y,
                f.point3d.z
            ));
        }
        s
    }
}
