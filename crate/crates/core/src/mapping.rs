//! Scan-to-map refinement of the current pose.
//!
//! The cost is the sliding-window feature residual (current features against
//! the matched features of the last `k` optimized frames) plus a Huber
//! point-to-plane residual against the map, minimized by Levenberg–Marquardt
//! over the current pose only.

use std::collections::VecDeque;

use nalgebra::{Matrix6, RowVector6, Vector6};
use thiserror::Error;

use crate::exec::Exec;
use crate::features::{match_features, Feature, MatchParams};
use crate::geometry::{Se3Pose, Twist, Vec3};
use crate::ikd::IkdTree;
use crate::planes::{fit_plane, PlaneKind, PlanePoint};

pub const MIN_CROSS_NORM: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MapError {
    #[error("anchors are collinear (cross product norm {0:e})")]
    DegeneratePlane(f64),
}

#[derive(Debug, Clone)]
pub struct WindowFrame {
    pub pose: Se3Pose,
    pub features: Vec<Feature>,
    pub timestamp: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlaneAssociation {
    /// Point in the scan frame.
    pub source: Vec3,
    pub anchors: [Vec3; 3],
    pub normal: Vec3,
}

impl PlaneAssociation {
    pub fn new(source: Vec3, anchors: [Vec3; 3]) -> Result<Self, MapError> {
        let n = (anchors[1] - anchors[0]).cross(&(anchors[2] - anchors[0]));
        let len = n.norm();
        if !(len > MIN_CROSS_NORM) {
            return Err(MapError::DegeneratePlane(len));
        }
        Ok(Self {
            source,
            anchors,
            normal: n / len,
        })
    }
}

/// Signed distance of the transformed source from the anchor plane.
pub fn plane_residual(assoc: &PlaneAssociation, pose: &Se3Pose) -> f64 {
    (pose.transform_point(&assoc.source) - assoc.anchors[0]).dot(&assoc.normal)
}

/// Derivative of [`plane_residual`] with respect to the pose tangent.
pub fn plane_jacobian(assoc: &PlaneAssociation, pose: &Se3Pose) -> RowVector6<f64> {
    assoc.normal.transpose() * pose.transform_point_jacobian(&assoc.source)
}

/// A current-frame feature point paired with a feature of a window frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BaCorrespondence {
    pub window_index: usize,
    pub current: Vec3,
    pub target: Vec3,
}

/// `T̂·P − T̂ᵢ·F` for every correspondence.
pub fn ba_residual(
    window: &[WindowFrame],
    current_pose: &Se3Pose,
    corrs: &[BaCorrespondence],
) -> Vec<Vec3> {
    corrs
        .iter()
        .map(|c| {
            current_pose.transform_point(&c.current)
                - window[c.window_index].pose.transform_point(&c.target)
        })
        .collect()
}

/// Derivative of one BA residual with respect to the current pose tangent.
pub fn ba_jacobian(current_pose: &Se3Pose, corr: &BaCorrespondence) -> nalgebra::Matrix3x6<f64> {
    current_pose.transform_point_jacobian(&corr.current)
}

/// Matches the current features against every window frame.
pub fn match_window(
    window: &[WindowFrame],
    features: &[Feature],
    params: &MatchParams,
) -> Vec<BaCorrespondence> {
    let mut out = Vec::new();
    for (wi, w) in window.iter().enumerate() {
        for m in match_features(&w.features, features, params) {
            out.push(BaCorrespondence {
                window_index: wi,
                current: features[m.index_curr].point3d,
                target: w.features[m.index_prev].point3d,
            });
        }
    }
    out
}

pub fn huber(r: f64, delta: f64) -> f64 {
    let a = r.abs();
    if a <= delta {
        r * r
    } else {
        2.0 * delta * a - delta * delta
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MapParams {
    pub window: usize,
    pub huber_delta: f64,
    pub neighbours: usize,
    pub anchor_radius: f64,
    pub max_plane_rms: f64,
    pub max_iterations: usize,
    pub local_map_radius: f64,
    pub use_ba: bool,
    /// BA correspondences beyond this multiple of the median residual at the
    /// initial pose are dropped.
    pub ba_trim_factor: f64,
    pub match_params: MatchParams,
    pub exec: Exec,
}

impl Default for MapParams {
    fn default() -> Self {
        Self {
            window: 5,
            huber_delta: 0.1,
            neighbours: 5,
            anchor_radius: 1.0,
            max_plane_rms: 0.05,
            max_iterations: 10,
            local_map_radius: 100.0,
            use_ba: true,
            ba_trim_factor: 3.0,
            match_params: MatchParams::default(),
            exec: Exec::default(),
        }
    }
}

/// Map association for one scan-frame point at the given pose.
///
/// The nearest neighbour is the first anchor; the other two are the pair
/// among the remaining neighbours spanning the largest triangle with it.
pub fn associate_point(
    map: &IkdTree,
    pose: &Se3Pose,
    source: &Vec3,
    params: &MapParams,
) -> Option<PlaneAssociation> {
    let q = pose.transform_point(source);
    let nn = map.knn(&q, params.neighbours.max(3));
    if nn.len() < params.neighbours.max(3) {
        return None;
    }
    let r2 = params.anchor_radius * params.anchor_radius;
    if nn.iter().any(|(_, d2)| *d2 > r2) {
        return None;
    }
    let pts: Vec<Vec3> = nn.iter().map(|(p, _)| *p).collect();
    let (_, _, rms) = fit_plane(&pts)?;
    if rms >= params.max_plane_rms {
        return None;
    }
    let a0 = pts[0];
    let mut best = (0.0, 1, 2);
    for i in 1..pts.len() {
        for j in i + 1..pts.len() {
            let c = (pts[i] - a0).cross(&(pts[j] - a0)).norm();
            if c > best.0 {
                best = (c, i, j);
            }
        }
    }
    let assoc = PlaneAssociation::new(*source, [a0, pts[best.1], pts[best.2]]).ok()?;
    // the anchor plane itself must explain every neighbour
    pts.iter()
        .all(|p| assoc.normal.dot(&(p - a0)).abs() < params.max_plane_rms)
        .then_some(assoc)
}

pub fn associate(
    map: &IkdTree,
    pose: &Se3Pose,
    sources: &[Vec3],
    params: &MapParams,
) -> Vec<PlaneAssociation> {
    params
        .exec
        .map_slice(sources, |s| associate_point(map, pose, s, params))
        .into_iter()
        .flatten()
        .collect()
}

struct Problem<'a> {
    window: &'a [WindowFrame],
    corrs: &'a [BaCorrespondence],
    assocs: &'a [PlaneAssociation],
    delta: f64,
}

impl Problem<'_> {
    fn cost(&self, pose: &Se3Pose) -> f64 {
        let ba: f64 = ba_residual(self.window, pose, self.corrs)
            .iter()
            .map(|r| r.norm_squared())
            .sum();
        let pl: f64 = self
            .assocs
            .iter()
            .map(|a| huber(plane_residual(a, pose), self.delta))
            .sum();
        ba + pl
    }

    /// Gauss–Newton system with IRLS weights for the Huber terms.
    fn normal_equations(&self, pose: &Se3Pose) -> (Matrix6<f64>, Vector6<f64>) {
        let mut h = Matrix6::zeros();
        let mut g = Vector6::zeros();
        for (c, r) in self
            .corrs
            .iter()
            .zip(ba_residual(self.window, pose, self.corrs))
        {
            let j = ba_jacobian(pose, c);
            h += j.transpose() * j;
            g += j.transpose() * r;
        }
        for a in self.assocs {
            let r = plane_residual(a, pose);
            let w = if r.abs() <= self.delta {
                1.0
            } else {
                self.delta / r.abs()
            };
            let j = plane_jacobian(a, pose);
            h += j.transpose() * j * w;
            g += j.transpose() * (w * r);
        }
        (h, g)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizeReport {
    pub pose: Se3Pose,
    pub iterations: usize,
    /// Cost before and after each outer iteration, both evaluated with that
    /// iteration's associations.
    pub costs: Vec<(f64, f64)>,
    pub plane_associations: usize,
    pub ba_correspondences: usize,
    /// Nothing constrained the pose; the initial guess was returned.
    pub unconstrained: bool,
}

/// Levenberg–Marquardt refinement of the current pose.
/// Scan points to associate against one map tree.
#[derive(Debug, Clone, Copy)]
pub struct MapLayer<'a> {
    pub map: &'a IkdTree,
    pub sources: &'a [Vec3],
}

pub fn optimize_pose(
    init: &Se3Pose,
    window: &[WindowFrame],
    corrs: &[BaCorrespondence],
    layers: &[MapLayer<'_>],
    params: &MapParams,
) -> OptimizeReport {
    let mut pose = *init;
    let mut lambda = 1e-4;
    let mut costs = Vec::new();
    let mut n_assoc = 0;
    let mut iterations = 0;
    for _ in 0..params.max_iterations {
        let assocs: Vec<PlaneAssociation> = layers
            .iter()
            .filter(|l| !l.map.is_empty())
            .flat_map(|l| associate(l.map, &pose, l.sources, params))
            .collect();
        n_assoc = assocs.len();
        if assocs.is_empty() && corrs.is_empty() {
            break;
        }
        iterations += 1;
        let prob = Problem {
            window,
            corrs,
            assocs: &assocs,
            delta: params.huber_delta,
        };
        let c0 = prob.cost(&pose);
        let (h, g) = prob.normal_equations(&pose);
        let scale = h.diagonal().max().max(1.0);
        let mut step_norm = 0.0;
        let mut c1 = c0;
        for _ in 0..10 {
            let damped = h + Matrix6::identity() * (lambda * scale);
            let Some(chol) = damped.cholesky() else {
                lambda *= 10.0;
                continue;
            };
            let delta = -chol.solve(&g);
            let cand = pose.perturb(&Twist::from_vector(&delta));
            let cc = prob.cost(&cand);
            if cc <= c0 {
                pose = cand;
                c1 = cc;
                step_norm = delta.norm();
                lambda = (lambda * 0.1).max(1e-12);
                break;
            }
            lambda *= 10.0;
        }
        costs.push((c0, c1));
        if step_norm < 1e-6 {
            break;
        }
    }
    OptimizeReport {
        pose,
        iterations,
        costs,
        plane_associations: n_assoc,
        ba_correspondences: corrs.len(),
        unconstrained: iterations == 0,
    }
}

/// Drops correspondences whose residual at `pose` exceeds `factor` times the
/// median. Matches on distant texture that barely moves between frames pin
/// the pose to the window and are removed here.
pub fn trim_correspondences(
    window: &[WindowFrame],
    pose: &Se3Pose,
    corrs: Vec<BaCorrespondence>,
    factor: f64,
) -> Vec<BaCorrespondence> {
    if corrs.is_empty() {
        return corrs;
    }
    let norms: Vec<f64> = ba_residual(window, pose, &corrs)
        .iter()
        .map(|r| r.norm())
        .collect();
    let mut sorted = norms.clone();
    sorted.sort_by(f64::total_cmp);
    let gate = (factor * sorted[sorted.len() / 2]).max(1e-6);
    corrs
        .into_iter()
        .zip(norms)
        .filter(|(_, n)| *n <= gate)
        .map(|(c, _)| c)
        .collect()
}

/// Sole owner of the map and the sliding window. Ground and general plane
/// points live in separate trees so that associations never mix the two.
#[derive(Debug, Clone)]
pub struct MapOptimizer {
    pub params: MapParams,
    ground: IkdTree,
    general: IkdTree,
    window: VecDeque<WindowFrame>,
}

impl MapOptimizer {
    pub fn new(params: MapParams) -> Self {
        Self {
            params,
            ground: IkdTree::new(),
            general: IkdTree::new(),
            window: VecDeque::new(),
        }
    }

    pub fn ground_map(&self) -> &IkdTree {
        &self.ground
    }

    pub fn general_map(&self) -> &IkdTree {
        &self.general
    }

    pub fn map_len(&self) -> usize {
        self.ground.len() + self.general.len()
    }

    /// All live map points, ground first.
    pub fn map_points(&self) -> Vec<Vec3> {
        let mut pts = self.ground.points();
        pts.extend(self.general.points());
        pts
    }

    pub fn window(&self) -> &VecDeque<WindowFrame> {
        &self.window
    }

    /// Refines `init`, then inserts the scan's plane points and features.
    pub fn process(
        &mut self,
        init: &Se3Pose,
        features: &[Feature],
        planes: &[PlanePoint],
        timestamp: f64,
    ) -> OptimizeReport {
        let window: Vec<WindowFrame> = self.window.iter().cloned().collect();
        let corrs = if self.params.use_ba {
            let raw = match_window(&window, features, &self.params.match_params);
            trim_correspondences(&window, init, raw, self.params.ba_trim_factor)
        } else {
            Vec::new()
        };
        let pick = |k: PlaneKind| -> Vec<Vec3> {
            planes
                .iter()
                .filter(|p| p.kind == k)
                .map(|p| p.position)
                .collect()
        };
        let (ground_src, general_src) = (pick(PlaneKind::Ground), pick(PlaneKind::General));
        let layers = [
            MapLayer {
                map: &self.ground,
                sources: &ground_src,
            },
            MapLayer {
                map: &self.general,
                sources: &general_src,
            },
        ];
        let report = optimize_pose(init, &window, &corrs, &layers, &self.params);
        let center = *report.pose.translation();
        for (tree, src) in [
            (&mut self.ground, &ground_src),
            (&mut self.general, &general_src),
        ] {
            let world: Vec<Vec3> = src.iter().map(|p| report.pose.transform_point(p)).collect();
            tree.insert(&world);
            tree.remove_beyond(&center, self.params.local_map_radius);
        }
        self.window.push_back(WindowFrame {
            pose: report.pose,
            features: features.to_vec(),
            timestamp,
        });
        while self.window.len() > self.params.window {
            self.window.pop_front();
        }
        report
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::Descriptor;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn v(x: f64, y: f64, z: f64) -> Vec3 {
        Vec3::new(x, y, z)
    }

    #[test]
    fn plane_residual_examples() {
        let anchors = [v(0.0, 0.0, 0.0), v(1.0, 0.0, 0.0), v(0.0, 1.0, 0.0)];
        let a = PlaneAssociation::new(v(5.0, 5.0, 0.0), anchors).unwrap();
        assert_eq!(plane_residual(&a, &Se3Pose::identity()), 0.0);
        let b = PlaneAssociation::new(v(5.0, 5.0, 2.0), anchors).unwrap();
        assert_eq!(plane_residual(&b, &Se3Pose::identity()), 2.0);
        let swapped =
            PlaneAssociation::new(v(5.0, 5.0, 2.0), [anchors[0], anchors[2], anchors[1]]).unwrap();
        assert_eq!(plane_residual(&swapped, &Se3Pose::identity()), -2.0);
        assert!(matches!(
            PlaneAssociation::new(
                v(0.0, 0.0, 0.0),
                [v(0.0, 0.0, 0.0), v(1.0, 0.0, 0.0), v(2.0, 0.0, 0.0)]
            ),
            Err(MapError::DegeneratePlane(_))
        ));
    }

    fn random_pose(rng: &mut ChaCha8Rng) -> Se3Pose {
        let axis = v(
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        );
        Se3Pose::new(
            nalgebra::UnitQuaternion::from_scaled_axis(
                axis.normalize() * rng.random_range(0.0..3.0),
            ),
            v(
                rng.random_range(-5.0..5.0),
                rng.random_range(-5.0..5.0),
                rng.random_range(-5.0..5.0),
            ),
        )
    }

    fn random_point(rng: &mut ChaCha8Rng) -> Vec3 {
        v(
            rng.random_range(-10.0..10.0),
            rng.random_range(-10.0..10.0),
            rng.random_range(-10.0..10.0),
        )
    }

    #[test]
    fn residual_permutation_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            let a = [
                random_point(&mut rng),
                random_point(&mut rng),
                random_point(&mut rng),
            ];
            let s = random_point(&mut rng);
            let pose = random_pose(&mut rng);
            let base = plane_residual(&PlaneAssociation::new(s, a).unwrap(), &pose);
            for perm in [[0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]] {
                let p = PlaneAssociation::new(s, [a[perm[0]], a[perm[1]], a[perm[2]]]).unwrap();
                let r = plane_residual(&p, &pose);
                assert!((r.abs() - base.abs()).abs() < 1e-9 * (1.0 + base.abs()));
            }
        }
    }

    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1.0)
    }

    #[test]
    fn jacobians_match_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let h = 1e-6;
        for _ in 0..100 {
            let pose = random_pose(&mut rng);
            let a = PlaneAssociation::new(
                random_point(&mut rng),
                [
                    random_point(&mut rng),
                    random_point(&mut rng),
                    random_point(&mut rng),
                ],
            )
            .unwrap();
            let window = vec![WindowFrame {
                pose: random_pose(&mut rng),
                features: Vec::new(),
                timestamp: 0.0,
            }];
            let c = BaCorrespondence {
                window_index: 0,
                current: random_point(&mut rng),
                target: random_point(&mut rng),
            };
            let jp = plane_jacobian(&a, &pose);
            let jb = ba_jacobian(&pose, &c);
            for k in 0..6 {
                let mut d = Vector6::zeros();
                d[k] = h;
                let plus = pose.perturb(&Twist::from_vector(&d));
                let minus = pose.perturb(&Twist::from_vector(&(-d)));
                let fd = (plane_residual(&a, &plus) - plane_residual(&a, &minus)) / (2.0 * h);
                assert!(
                    rel_err(jp[k], fd) < 1e-5,
                    "plane col {k}: {} vs {fd}",
                    jp[k]
                );
                let rp = ba_residual(&window, &plus, &[c])[0];
                let rm = ba_residual(&window, &minus, &[c])[0];
                let fdb = (rp - rm) / (2.0 * h);
                for i in 0..3 {
                    assert!(rel_err(jb[(i, k)], fdb[i]) < 1e-5);
                }
            }
        }
    }

    fn feature(p: Vec3, seed: u64) -> Feature {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Feature {
            row: 0,
            col: 0,
            response: 1.0,
            descriptor: Descriptor([rng.random(), rng.random(), rng.random(), rng.random()]),
            point3d: p,
        }
    }

    #[test]
    fn ba_residual_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let feats: Vec<Feature> = (0..30)
            .map(|i| feature(random_point(&mut rng), i))
            .collect();
        let window = vec![WindowFrame {
            pose: Se3Pose::identity(),
            features: feats.clone(),
            timestamp: 0.0,
        }];
        let corrs = match_window(&window, &feats, &MatchParams::default());
        assert_eq!(corrs.len(), 30);
        for r in ba_residual(&window, &Se3Pose::identity(), &corrs) {
            assert_eq!(r, Vec3::zeros());
        }
        let off = Se3Pose::from_translation(v(0.1, 0.0, 0.0));
        for r in ba_residual(&window, &off, &corrs) {
            assert!((r - v(0.1, 0.0, 0.0)).norm() < 1e-12);
        }
        let strangers: Vec<Feature> = (0..30)
            .map(|i| feature(random_point(&mut rng), 1000 + i))
            .collect();
        assert!(match_window(&window, &strangers, &MatchParams::default()).is_empty());
    }

    /// Points on three orthogonal planes around the origin.
    fn box_points(step: f64) -> Vec<Vec3> {
        let mut pts = Vec::new();
        let n = (8.0 / step) as i32;
        for i in -n..=n {
            for j in -n..=n {
                let (a, b) = (i as f64 * step * 0.5, j as f64 * step * 0.5);
                pts.push(v(a, b, -1.0));
                pts.push(v(4.0, a, b));
                pts.push(v(a, 3.0, b));
            }
        }
        pts
    }

    #[test]
    fn perfect_init_is_kept_and_perturbed_init_recovers() {
        let world = box_points(0.2);
        let map = IkdTree::build(&world);
        let truth = Se3Pose::rot_z(0.3).compose(&Se3Pose::from_translation(v(0.5, -0.2, 0.1)));
        let inv = truth.inverse();
        let scan: Vec<Vec3> = world
            .iter()
            .step_by(7)
            .map(|p| inv.transform_point(p))
            .collect();
        let params = MapParams {
            exec: Exec::Serial,
            ..Default::default()
        };
        let layer = [MapLayer {
            map: &map,
            sources: &scan,
        }];
        let r = optimize_pose(&truth, &[], &[], &layer, &params);
        let (dt, da) = r.pose.distance_to(&truth);
        assert!(dt < 1e-9 && da < 1e-9);
        assert!(r.costs[0].0 < 1e-18);

        let init = truth.perturb(&Twist::new(
            v(0.0, 0.0, 2f64.to_radians()),
            v(0.06, -0.05, 0.05),
        ));
        let r = optimize_pose(&init, &[], &[], &layer, &params);
        let (dt, da) = r.pose.distance_to(&truth);
        assert!(dt < 1e-3 && da < 0.05f64.to_radians(), "{dt} {da}");
        for (c0, c1) in &r.costs {
            assert!(c1 <= c0);
        }
    }

    #[test]
    fn corridor_direction_is_untouched() {
        // two walls and a floor, all parallel to x; the floor stops short of
        // the walls so every neighbourhood lies on a single plane
        let mut world = Vec::new();
        for i in -100..=100 {
            for j in 0..13 {
                let x = i as f64 * 0.2;
                let s = j as f64 * 0.2;
                world.push(v(x, 1.5, 0.0 + s));
                world.push(v(x, -1.5, 0.0 + s));
                world.push(v(x, -1.2 + s, -0.5));
            }
        }
        let map = IkdTree::build(&world);
        let scan: Vec<Vec3> = world.iter().step_by(5).copied().collect();
        let init = Se3Pose::from_translation(v(0.37, 0.08, -0.04));
        let params = MapParams {
            exec: Exec::Serial,
            ..Default::default()
        };
        let r = optimize_pose(
            &init,
            &[],
            &[],
            &[MapLayer {
                map: &map,
                sources: &scan,
            }],
            &params,
        );
        assert!(r.plane_associations > 0);
        assert!((r.pose.translation().x - 0.37).abs() < 1e-9);
        assert!(r.pose.translation().y.abs() < 1e-3);
        assert!(r.pose.translation().z.abs() < 1e-3);
    }

    #[test]
    fn empty_everything_returns_init() {
        let init = Se3Pose::from_translation(v(1.0, 2.0, 3.0));
        let empty = IkdTree::new();
        let src = [v(1.0, 0.0, 0.0)];
        let r = optimize_pose(
            &init,
            &[],
            &[],
            &[MapLayer {
                map: &empty,
                sources: &src,
            }],
            &MapParams::default(),
        );
        assert!(r.unconstrained);
        assert_eq!(r.pose, init);
    }

    #[test]
    fn process_inserts_plane_points() {
        let mut opt = MapOptimizer::new(MapParams::default());
        let pts: Vec<PlanePoint> = box_points(0.4)
            .into_iter()
            .map(|p| PlanePoint {
                position: p,
                kind: PlaneKind::General,
            })
            .collect();
        let pose = Se3Pose::from_translation(v(1.0, 0.0, 0.0));
        opt.process(&pose, &[], &pts, 0.0);
        for p in pts.iter().step_by(13) {
            let q = pose.transform_point(&p.position);
            let nn = opt.general_map().knn(&q, 1);
            assert!(nn[0].1.sqrt() <= crate::ikd::DEDUP_RADIUS);
        }
        assert_eq!(opt.window().len(), 1);
    }
}
