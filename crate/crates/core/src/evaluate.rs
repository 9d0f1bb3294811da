//! Absolute pose error after rigid trajectory alignment.

use thiserror::Error;

use crate::geometry::{rigid_align_any, GeometryError, Se3Pose, Vec3};
use crate::scan::TrajectoryRecord;

/// Maximum timestamp difference for two records to be paired.
pub const ASSOCIATION_TOLERANCE: f64 = 0.05;

#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    #[error("no estimated pose has a ground-truth pose within {0} s")]
    NoAssociations(f64),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ApeStats {
    pub count: usize,
    pub mean: f64,
    pub median: f64,
    pub rmse: f64,
    pub max: f64,
    /// Per-axis RMSE in the ground-truth frame.
    pub rmse_axes: Vec3,
    /// Transform applied to the estimate.
    pub alignment: Se3Pose,
}

impl std::fmt::Display for ApeStats {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(f, "pairs: {}", self.count)?;
        writeln!(f, "mean: {:.6}", self.mean)?;
        writeln!(f, "median: {:.6}", self.median)?;
        writeln!(f, "rmse: {:.6}", self.rmse)?;
        writeln!(f, "max: {:.6}", self.max)?;
        write!(
            f,
            "rmse_xyz: {:.6} {:.6} {:.6}",
            self.rmse_axes.x, self.rmse_axes.y, self.rmse_axes.z
        )
    }
}

/// Pairs each estimate with the ground-truth record nearest in time.
pub fn associate(
    est: &[TrajectoryRecord],
    gt: &[TrajectoryRecord],
    tolerance: f64,
) -> Vec<(Vec3, Vec3)> {
    let mut order: Vec<usize> = (0..gt.len()).collect();
    order.sort_by(|&a, &b| gt[a].timestamp.total_cmp(&gt[b].timestamp));
    let times: Vec<f64> = order.iter().map(|&i| gt[i].timestamp).collect();
    est.iter()
        .filter_map(|e| {
            let k = times.partition_point(|&t| t < e.timestamp);
            let best = [k.checked_sub(1), (k < times.len()).then_some(k)]
                .into_iter()
                .flatten()
                .min_by(|&a, &b| {
                    (times[a] - e.timestamp)
                        .abs()
                        .total_cmp(&(times[b] - e.timestamp).abs())
                })?;
            ((times[best] - e.timestamp).abs() <= tolerance)
                .then(|| (*e.pose.translation(), *gt[order[best]].pose.translation()))
        })
        .collect()
}

pub fn ape(est: &[TrajectoryRecord], gt: &[TrajectoryRecord]) -> Result<ApeStats, EvalError> {
    let pairs = associate(est, gt, ASSOCIATION_TOLERANCE);
    if pairs.is_empty() {
        return Err(EvalError::NoAssociations(ASSOCIATION_TOLERANCE));
    }
    let (src, dst): (Vec<Vec3>, Vec<Vec3>) = pairs.into_iter().unzip();
    let alignment = if src.len() == 1 {
        Se3Pose::from_translation(dst[0] - src[0])
    } else {
        rigid_align_any(&src, &dst, &vec![1.0; src.len()])?
    };
    let diffs: Vec<Vec3> = src
        .iter()
        .zip(&dst)
        .map(|(s, d)| alignment.transform_point(s) - d)
        .collect();
    let mut errs: Vec<f64> = diffs.iter().map(|d| d.norm()).collect();
    let n = errs.len() as f64;
    let rmse = (errs.iter().map(|e| e * e).sum::<f64>() / n).sqrt();
    let rmse_axes = diffs
        .iter()
        .fold(Vec3::zeros(), |acc, d| acc + d.component_mul(d))
        .map(|v| (v / n).sqrt());
    let mean = errs.iter().sum::<f64>() / n;
    let max = errs.iter().copied().fold(0.0, f64::max);
    errs.sort_by(f64::total_cmp);
    let m = errs.len();
    let median = if m % 2 == 1 {
        errs[m / 2]
    } else {
        0.5 * (errs[m / 2 - 1] + errs[m / 2])
    };
    Ok(ApeStats {
        count: m,
        mean,
        median,
        rmse,
        max,
        rmse_axes,
        alignment,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn wiggly(n: usize) -> Vec<TrajectoryRecord> {
        (0..n)
            .map(|i| {
                let t = i as f64 * 0.1;
                let p = Vec3::new(
                    i as f64 * 0.3,
                    (i as f64 * 0.2).sin() * 2.0,
                    (i as f64 * 0.05).cos(),
                );
                TrajectoryRecord::new(
                    t,
                    Se3Pose::from_translation(p).compose(&Se3Pose::rot_z(0.1 * i as f64)),
                )
            })
            .collect()
    }

    #[test]
    fn self_comparison_is_zero() {
        let t = wiggly(40);
        let s = ape(&t, &t).unwrap();
        assert_eq!(s.count, 40);
        assert!(s.rmse < 1e-12 && s.max < 1e-12 && s.mean < 1e-12 && s.median < 1e-12);
    }

    #[test]
    fn no_overlap_in_time() {
        let a = wiggly(5);
        let b: Vec<_> = a
            .iter()
            .map(|r| TrajectoryRecord::new(r.timestamp + 100.0, r.pose))
            .collect();
        assert_eq!(
            ape(&a, &b),
            Err(EvalError::NoAssociations(ASSOCIATION_TOLERANCE))
        );
    }

    #[test]
    fn association_respects_tolerance() {
        let gt = wiggly(10);
        let est: Vec<_> = gt
            .iter()
            .map(|r| TrajectoryRecord::new(r.timestamp + 0.04, r.pose))
            .collect();
        assert_eq!(associate(&est, &gt, ASSOCIATION_TOLERANCE).len(), 10);
        let late: Vec<_> = gt
            .iter()
            .map(|r| TrajectoryRecord::new(r.timestamp + 0.06, r.pose))
            .collect();
        // 0.06 s late is 0.04 s early for the next record, except at the end
        assert_eq!(associate(&late, &gt, ASSOCIATION_TOLERANCE).len(), 9);
    }

    #[test]
    fn one_outlier_among_hundred() {
        // a figure eight through its own centroid at i = 50: every rotation is
        // observable, yet none has any lever on an error placed at the centroid
        let gt: Vec<_> = (0..100)
            .map(|i| {
                let th = std::f64::consts::TAU * i as f64 / 100.0;
                let p = Vec3::new(
                    20.0 * th.sin(),
                    10.0 * (2.0 * th).sin(),
                    5.0 * (3.0 * th).sin(),
                );
                TrajectoryRecord::new(i as f64 * 0.1, Se3Pose::from_translation(p))
            })
            .collect();
        let mut est = gt.clone();
        est[50].pose =
            Se3Pose::from_translation(est[50].pose.translation() + Vec3::new(0.0, 0.0, 1.0));
        let s = ape(&est, &gt).unwrap();
        // the alignment shifts everything by 1/100 in z: 99 errors of 0.01 and one of 0.99
        let expected = ((99.0 * 1e-4 + 0.99f64.powi(2)) / 100.0).sqrt();
        assert!((s.rmse - expected).abs() < 1e-9, "{} vs {expected}", s.rmse);
        assert!((s.rmse - 0.1).abs() < 1e-3);
        assert!(s.alignment.rotation_angle() < 1e-9);
    }

    proptest! {
        #[test]
        fn rigidly_moved_copy_aligns_to_zero(yaw in -3.0f64..3.0, tx in -50.0f64..50.0, ty in -50.0f64..50.0, tz in -5.0f64..5.0) {
            let gt = wiggly(30);
            let g = Se3Pose::from_translation(Vec3::new(tx, ty, tz)).compose(&Se3Pose::rot_z(yaw));
            let est: Vec<_> = gt.iter().map(|r| TrajectoryRecord::new(r.timestamp, g.compose(&r.pose))).collect();
            let s = ape(&est, &gt).unwrap();
            prop_assert!(s.rmse < 1e-9 && s.max < 1e-9);
        }
    }
}
