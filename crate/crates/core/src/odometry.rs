//! Frame-to-frame motion from matched intensity features.

use thiserror::Error;

use crate::features::{match_features, IntensityFrame, MatchParams};
use crate::geometry::{weighted_rigid_align, GeometryError, Se3Pose, Vec3};
use crate::ikd::IkdTree;
use crate::scan::OrganizedScan;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OdometryError {
    #[error("insufficient matches: {found} < {required}")]
    InsufficientMatches { found: usize, required: usize },
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error("no convergence after {0} iterations")]
    NoConvergence(usize),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OdometryEstimate {
    /// Maps previous-frame coordinates into the current frame.
    pub relative: Se3Pose,
    pub inlier_count: usize,
    pub mean_residual: f64,
    pub low_confidence: bool,
}

impl OdometryEstimate {
    /// Pose of the current sensor expressed in the previous sensor frame.
    pub fn motion(&self) -> Se3Pose {
        self.relative.inverse()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RegistrationParams {
    pub min_matches: usize,
    pub max_rounds: usize,
    /// Residuals above `trim_factor × median` are dropped after each round.
    pub trim_factor: f64,
}

impl Default for RegistrationParams {
    fn default() -> Self {
        Self {
            min_matches: 8,
            max_rounds: 5,
            trim_factor: 3.0,
        }
    }
}

/// Per-round record of the trimmed loop.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundStats {
    pub active: usize,
    /// Σ S² ‖Y − (R X + T)‖² over the active set after the solve.
    pub objective: f64,
    pub rejected: usize,
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Trimmed weighted alignment, also returning the round history.
pub fn register_traced(
    prev_pts: &[Vec3],
    curr_pts: &[Vec3],
    scores: &[f64],
    params: &RegistrationParams,
) -> Result<(OdometryEstimate, Vec<RoundStats>), OdometryError> {
    let n = prev_pts.len();
    if curr_pts.len() != n || scores.len() != n {
        return Err(
            GeometryError::InvalidInput("point and score lists differ in length".into()).into(),
        );
    }
    if n < params.min_matches {
        return Err(OdometryError::InsufficientMatches {
            found: n,
            required: params.min_matches,
        });
    }
    let mut active: Vec<usize> = (0..n).collect();
    let mut history = Vec::new();
    let mut pose = Se3Pose::identity();
    for _ in 0..params.max_rounds.max(1) {
        if active.len() < 3 {
            return Err(GeometryError::DegenerateConfiguration(
                "fewer than 3 matches survived trimming".into(),
            )
            .into());
        }
        let src: Vec<Vec3> = active.iter().map(|&i| prev_pts[i]).collect();
        let dst: Vec<Vec3> = active.iter().map(|&i| curr_pts[i]).collect();
        let w: Vec<f64> = active.iter().map(|&i| scores[i] * scores[i]).collect();
        pose = weighted_rigid_align(&src, &dst, &w)?;
        let res: Vec<f64> = src
            .iter()
            .zip(&dst)
            .map(|(x, y)| (y - pose.transform_point(x)).norm())
            .collect();
        let objective = res.iter().zip(&w).map(|(r, w)| w * r * r).sum();
        let cut = (params.trim_factor * median(&mut res.clone())).max(1e-6);
        let keep: Vec<usize> = active
            .iter()
            .zip(&res)
            .filter(|(_, r)| **r <= cut)
            .map(|(i, _)| *i)
            .collect();
        let rejected = active.len() - keep.len();
        history.push(RoundStats {
            active: active.len(),
            objective,
            rejected,
        });
        if rejected == 0 {
            break;
        }
        active = keep;
    }
    // residuals of the final survivors against the final pose
    let mut inliers = 0;
    let mut sum = 0.0;
    for &i in &active {
        sum += (curr_pts[i] - pose.transform_point(&prev_pts[i])).norm();
        inliers += 1;
    }
    Ok((
        OdometryEstimate {
            relative: pose,
            inlier_count: inliers,
            mean_residual: if inliers > 0 {
                sum / inliers as f64
            } else {
                0.0
            },
            low_confidence: false,
        },
        history,
    ))
}

/// Minimizes Σ S² ‖Y − (R X + T)‖² with a trimmed robust loop.
pub fn register_matched(
    prev_pts: &[Vec3],
    curr_pts: &[Vec3],
    scores: &[f64],
) -> Result<OdometryEstimate, OdometryError> {
    register_matched_with(prev_pts, curr_pts, scores, &RegistrationParams::default())
}

pub fn register_matched_with(
    prev_pts: &[Vec3],
    curr_pts: &[Vec3],
    scores: &[f64],
    params: &RegistrationParams,
) -> Result<OdometryEstimate, OdometryError> {
    register_traced(prev_pts, curr_pts, scores, params).map(|(e, _)| e)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IcpResult {
    /// Maps `src` coordinates onto `dst`.
    pub pose: Se3Pose,
    pub iterations: usize,
    pub rmse: f64,
}

/// Point-to-point ICP between two scans. Only used as a reference in tests.
pub fn icp_align(
    src: &OrganizedScan,
    dst: &OrganizedScan,
    max_iter: usize,
) -> Result<IcpResult, OdometryError> {
    const MAX_PAIR_DIST: f64 = 1.0;
    let s: Vec<Vec3> = src.valid_points().collect();
    let d: Vec<Vec3> = dst.valid_points().collect();
    if s.len() < 100 || d.len() < 100 {
        return Err(OdometryError::InsufficientMatches {
            found: s.len().min(d.len()),
            required: 100,
        });
    }
    let tree = IkdTree::build(&d);
    let mut pose = Se3Pose::identity();
    for it in 1..=max_iter {
        let mut a = Vec::with_capacity(s.len());
        let mut b = Vec::with_capacity(s.len());
        for p in &s {
            let q = pose.transform_point(p);
            if let Some((nn, d2)) = tree.knn(&q, 1).first() {
                if *d2 <= MAX_PAIR_DIST * MAX_PAIR_DIST {
                    a.push(*p);
                    b.push(*nn);
                }
            }
        }
        if a.len() < 3 {
            return Err(OdometryError::NoConvergence(it));
        }
        let w = vec![1.0; a.len()];
        let next = weighted_rigid_align(&a, &b, &w)?;
        let delta = pose.between(&next).log().norm();
        pose = next;
        if delta < 1e-6 {
            let sq: f64 = a
                .iter()
                .zip(&b)
                .map(|(x, y)| (pose.transform_point(x) - y).norm_squared())
                .sum();
            return Ok(IcpResult {
                pose,
                iterations: it,
                rmse: (sq / a.len() as f64).sqrt(),
            });
        }
    }
    Err(OdometryError::NoConvergence(max_iter))
}

/// Tracks consecutive frames, falling back to constant velocity when
/// registration fails.
#[derive(Debug, Clone)]
pub struct Odometry {
    pub match_params: MatchParams,
    pub registration: RegistrationParams,
    last_relative: Se3Pose,
    fallbacks: usize,
}

impl Odometry {
    pub fn new(match_params: MatchParams, registration: RegistrationParams) -> Self {
        Self {
            match_params,
            registration,
            last_relative: Se3Pose::identity(),
            fallbacks: 0,
        }
    }

    pub fn fallback_count(&self) -> usize {
        self.fallbacks
    }

    pub fn advance(&mut self, prev: &IntensityFrame, curr: &IntensityFrame) -> OdometryEstimate {
        let matches = match_features(&prev.features, &curr.features, &self.match_params);
        let a: Vec<Vec3> = matches
            .iter()
            .map(|m| prev.features[m.index_prev].point3d)
            .collect();
        let b: Vec<Vec3> = matches
            .iter()
            .map(|m| curr.features[m.index_curr].point3d)
            .collect();
        let s: Vec<f64> = matches.iter().map(|m| m.score).collect();
        match register_matched_with(&a, &b, &s, &self.registration) {
            Ok(est) if est.relative.is_finite() => {
                self.last_relative = est.relative;
                est
            }
            _ => {
                self.fallbacks += 1;
                log::debug!(
                    "odometry fallback at t={:.3} ({} matches)",
                    curr.timestamp,
                    matches.len()
                );
                OdometryEstimate {
                    relative: self.last_relative,
                    inlier_count: 0,
                    mean_residual: 0.0,
                    low_confidence: true,
                }
            }
        }
    }
}

impl Default for Odometry {
    fn default() -> Self {
        Self::new(MatchParams::default(), RegistrationParams::default())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image::IntensityImage;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn random_pose(rng: &mut ChaCha8Rng) -> Se3Pose {
        let axis = Vec3::new(
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        );
        Se3Pose::from_axis_angle(&axis, rng.random_range(0.0..3.0)).compose(
            &Se3Pose::from_translation(Vec3::new(
                rng.random_range(-5.0..5.0),
                rng.random_range(-5.0..5.0),
                rng.random_range(-5.0..5.0),
            )),
        )
    }

    fn cloud(rng: &mut ChaCha8Rng, n: usize) -> Vec<Vec3> {
        (0..n)
            .map(|_| {
                Vec3::new(
                    rng.random_range(-20.0..20.0),
                    rng.random_range(-20.0..20.0),
                    rng.random_range(-3.0..3.0),
                )
            })
            .collect()
    }

    #[test]
    fn identical_points_give_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = cloud(&mut rng, 50);
        let e = register_matched(&p, &p, &vec![1.0; 50]).unwrap();
        let (dt, da) = e.relative.distance_to(&Se3Pose::identity());
        assert!(dt < 1e-12 && da < 1e-12);
        assert!(e.mean_residual < 1e-12);
        assert_eq!(e.inlier_count, 50);
    }

    #[test]
    fn recovers_random_motion() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..100 {
            let truth = random_pose(&mut rng);
            let p = cloud(&mut rng, 40);
            let q: Vec<Vec3> = p.iter().map(|x| truth.transform_point(x)).collect();
            let s: Vec<f64> = (0..40).map(|_| rng.random_range(0.75..1.0)).collect();
            let (e, rounds) = register_traced(&p, &q, &s, &RegistrationParams::default()).unwrap();
            let (dt, da) = e.relative.distance_to(&truth);
            assert!(dt < 1e-9 && da < 1e-9, "{dt} {da}");
            // noise-free inliers: one round, nothing rejected
            assert_eq!(rounds.len(), 1);
            assert_eq!(rounds[0].rejected, 0);
        }
    }

    #[test]
    fn gross_outliers_are_trimmed() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let truth = random_pose(&mut rng);
            let p = cloud(&mut rng, 100);
            let mut q: Vec<Vec3> = p.iter().map(|x| truth.transform_point(x)).collect();
            for qi in q.iter_mut().take(10) {
                let dir = Vec3::new(
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                )
                .normalize();
                *qi += dir * 10.0;
            }
            let (e, rounds) =
                register_traced(&p, &q, &vec![1.0; 100], &RegistrationParams::default()).unwrap();
            let (dt, da) = e.relative.distance_to(&truth);
            assert!(dt < 1e-3 && da < 1e-3, "{dt} {da}");
            for w in rounds.windows(2) {
                assert!(w[1].objective <= w[0].objective + 1e-9);
            }
        }
    }

    #[test]
    fn too_few_matches() {
        let p = vec![Vec3::new(1.0, 2.0, 3.0); 5];
        assert!(matches!(
            register_matched(&p, &p, &[1.0; 5]),
            Err(OdometryError::InsufficientMatches {
                found: 5,
                required: 8
            })
        ));
    }

    #[test]
    fn error_shrinks_with_sqrt_n() {
        // Monte-Carlo: translation error ∝ σ/√N, so doubling N divides it by √2
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let noise = Normal::new(0.0, 0.02).unwrap();
        let mean_err = |n: usize, rng: &mut ChaCha8Rng| {
            let mut total = 0.0;
            for _ in 0..200 {
                let truth = random_pose(rng);
                let p = cloud(rng, n);
                let q: Vec<Vec3> = p
                    .iter()
                    .map(|x| {
                        truth.transform_point(x)
                            + Vec3::new(noise.sample(rng), noise.sample(rng), noise.sample(rng))
                    })
                    .collect();
                let e = register_matched(&p, &q, &vec![1.0; n]).unwrap();
                total += (e.relative.translation() - truth.translation()).norm();
            }
            total / 200.0
        };
        let e1 = mean_err(50, &mut rng);
        let e2 = mean_err(100, &mut rng);
        let ratio = e1 / e2;
        let sqrt2 = 2f64.sqrt();
        assert!(ratio > 0.8 * sqrt2 && ratio < 1.2 * sqrt2, "ratio {ratio}");
    }

    #[test]
    fn icp_identity_and_no_overlap() {
        let mut scan = OrganizedScan::new(16, 64, 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for r in 0..16 {
            for c in 0..64 {
                let p = Vec3::new(
                    rng.random_range(-10.0..10.0),
                    rng.random_range(-10.0..10.0),
                    rng.random_range(-2.0..2.0),
                );
                scan.set(r, c, crate::scan::ScanPoint::new(p, 1.0));
            }
        }
        let r = icp_align(&scan, &scan, 10).unwrap();
        assert_eq!(r.iterations, 1);
        assert!(r.pose.distance_to(&Se3Pose::identity()).0 < 1e-12);

        let mut far = scan.clone();
        for i in 0..far.len() {
            let mut p = far.points()[i];
            p.xyz += Vec3::new(500.0, 0.0, 0.0);
            far.set(i / 64, i % 64, p);
        }
        assert!(matches!(
            icp_align(&scan, &far, 10),
            Err(OdometryError::NoConvergence(_))
        ));
    }

    #[test]
    fn featureless_frames_fall_back() {
        let img = IntensityImage::from_pixels(16, 64, vec![50; 16 * 64]);
        let f = IntensityFrame {
            timestamp: 0.0,
            image: img,
            features: Vec::new(),
        };
        let mut odo = Odometry::default();
        let e = odo.advance(&f, &f);
        assert!(e.low_confidence);
        assert_eq!(e.relative, Se3Pose::identity());
        assert_eq!(odo.fallback_count(), 1);
    }

    proptest! {
        #[test]
        fn uniform_score_scale_invariance(seed in 0u64..500, scale in 0.01f64..100.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let truth = random_pose(&mut rng);
            let noise = Normal::new(0.0, 0.05).unwrap();
            let p = cloud(&mut rng, 30);
            let q: Vec<Vec3> = p
                .iter()
                .map(|x| truth.transform_point(x) + Vec3::new(noise.sample(&mut rng), noise.sample(&mut rng), noise.sample(&mut rng)))
                .collect();
            let a = register_matched(&p, &q, &vec![0.9; 30]).unwrap();
            let b = register_matched(&p, &q, &vec![0.9 * scale; 30]).unwrap();
            let (dt, da) = a.relative.distance_to(&b.relative);
            prop_assert!(dt < 1e-12 && da < 1e-12);
            prop_assert_eq!(a.inlier_count, b.inlier_count);
        }
    }
}
