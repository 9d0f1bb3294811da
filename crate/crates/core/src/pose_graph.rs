//! Keyframe pose graph with a sparse Levenberg–Marquardt solver.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector, Matrix6, Vector6};
use nalgebra_sparse::factorization::CscCholesky;
use nalgebra_sparse::{CooMatrix, CscMatrix};
use thiserror::Error;

use crate::geometry::{Se3Pose, Twist};
use crate::loop_closure::LoopCandidate;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GraphError {
    #[error("graph is disconnected ({0} components)")]
    DisconnectedGraph(usize),
    #[error("information matrix of edge {0} is not symmetric positive definite")]
    NotPositiveDefinite(usize),
    #[error("invalid graph: {0}")]
    InvalidInput(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EdgeKind {
    Odometry,
    Loop,
}

/// Tangent ordering of the information matrix is `[rotation, translation]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GraphEdge {
    pub from: usize,
    pub to: usize,
    /// Measured `pose_from⁻¹ · pose_to`.
    pub relative: Se3Pose,
    pub information: Matrix6<f64>,
    pub kind: EdgeKind,
}

impl GraphEdge {
    pub fn residual(&self, from: &Se3Pose, to: &Se3Pose) -> Vector6<f64> {
        self.relative
            .inverse()
            .compose(&from.between(to))
            .log()
            .to_vector()
    }

    pub fn cost(&self, from: &Se3Pose, to: &Se3Pose) -> f64 {
        let e = self.residual(from, to);
        (e.transpose() * self.information * e)[(0, 0)]
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GraphParams {
    pub max_iterations: usize,
    pub gradient_tolerance: f64,
}

impl Default for GraphParams {
    fn default() -> Self {
        Self {
            max_iterations: 50,
            gradient_tolerance: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GraphSolution {
    pub poses: Vec<Se3Pose>,
    pub iterations: usize,
    pub initial_cost: f64,
    pub final_cost: f64,
    /// Cost after every accepted step.
    pub history: Vec<f64>,
}

pub fn total_cost(poses: &[Se3Pose], edges: &[GraphEdge]) -> f64 {
    edges
        .iter()
        .map(|e| e.cost(&poses[e.from], &poses[e.to]))
        .sum()
}

fn check_information(i: usize, m: &Matrix6<f64>) -> Result<(), GraphError> {
    if (m - m.transpose()).abs().max() > 1e-9 || m.cholesky().is_none() {
        return Err(GraphError::NotPositiveDefinite(i));
    }
    Ok(())
}

fn components(n: usize, edges: &[GraphEdge]) -> usize {
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(p: &mut [usize], mut x: usize) -> usize {
        while p[x] != x {
            p[x] = p[p[x]];
            x = p[x];
        }
        x
    }
    for e in edges {
        let (a, b) = (find(&mut parent, e.from), find(&mut parent, e.to));
        if a != b {
            parent[a] = b;
        }
    }
    (0..n).filter(|&i| find(&mut parent, i) == i).count()
}

/// Central-difference Jacobians of one edge residual with respect to the
/// tangents of both endpoints.
fn edge_jacobians(e: &GraphEdge, from: &Se3Pose, to: &Se3Pose) -> (Matrix6<f64>, Matrix6<f64>) {
    const H: f64 = 1e-6;
    let mut ja = Matrix6::zeros();
    let mut jb = Matrix6::zeros();
    for k in 0..6 {
        let mut d = Vector6::zeros();
        d[k] = H;
        let p = Twist::from_vector(&d);
        let m = Twist::from_vector(&(-d));
        let col_a =
            (e.residual(&from.perturb(&p), to) - e.residual(&from.perturb(&m), to)) / (2.0 * H);
        let col_b =
            (e.residual(from, &to.perturb(&p)) - e.residual(from, &to.perturb(&m))) / (2.0 * H);
        ja.set_column(k, &col_a);
        jb.set_column(k, &col_b);
    }
    (ja, jb)
}

/// Minimizes `Σ eᵀ Ω e` over all non-fixed vertices.
pub fn optimize_graph(
    poses: &[Se3Pose],
    edges: &[GraphEdge],
    fixed: &BTreeSet<usize>,
    params: &GraphParams,
) -> Result<GraphSolution, GraphError> {
    let n = poses.len();
    for (i, e) in edges.iter().enumerate() {
        if e.from >= n || e.to >= n || e.from == e.to {
            return Err(GraphError::InvalidInput(format!(
                "edge {i} ({} -> {})",
                e.from, e.to
            )));
        }
        check_information(i, &e.information)?;
    }
    if fixed.is_empty() || fixed.iter().any(|&f| f >= n) {
        return Err(GraphError::InvalidInput(
            "need at least one valid fixed vertex".into(),
        ));
    }
    let comps = components(n, edges);
    if comps > 1 {
        return Err(GraphError::DisconnectedGraph(comps));
    }
    // column block of each free vertex
    let mut slot = vec![usize::MAX; n];
    let mut free = 0;
    for (i, s) in slot.iter_mut().enumerate() {
        if !fixed.contains(&i) {
            *s = free;
            free += 1;
        }
    }
    let mut x = poses.to_vec();
    let initial_cost = total_cost(&x, edges);
    let mut cost = initial_cost;
    let mut history = Vec::new();
    let mut lambda = 1e-6;
    let mut iterations = 0;
    if free == 0 {
        return Ok(GraphSolution {
            poses: x,
            iterations,
            initial_cost,
            final_cost: cost,
            history,
        });
    }
    let dim = 6 * free;
    'outer: for _ in 0..params.max_iterations {
        let mut coo = CooMatrix::new(dim, dim);
        let mut g = DVector::zeros(dim);
        let mut diag_max: f64 = 0.0;
        for e in edges {
            let (a, b) = (&x[e.from], &x[e.to]);
            let r = e.residual(a, b);
            let (ja, jb) = edge_jacobians(e, a, b);
            let blocks = [(slot[e.from], ja), (slot[e.to], jb)];
            for (si, ji) in &blocks {
                if *si == usize::MAX {
                    continue;
                }
                let gi = ji.transpose() * e.information * r;
                let mut seg = g.rows_mut(6 * si, 6);
                seg += &gi;
                for (sj, jj) in &blocks {
                    if *sj == usize::MAX {
                        continue;
                    }
                    let hij = ji.transpose() * e.information * jj;
                    for r_ in 0..6 {
                        for c_ in 0..6 {
                            coo.push(6 * si + r_, 6 * sj + c_, hij[(r_, c_)]);
                        }
                    }
                    if si == sj {
                        diag_max = diag_max.max(hij.diagonal().max());
                    }
                }
            }
        }
        if g.amax() < params.gradient_tolerance {
            break;
        }
        let scale = diag_max.max(1e-12);
        for _ in 0..20 {
            let mut damped = coo.clone();
            for i in 0..dim {
                damped.push(i, i, lambda * scale);
            }
            let damped = CscMatrix::from(&damped);
            let Ok(chol) = CscCholesky::factor(&damped) else {
                lambda *= 10.0;
                continue;
            };
            let neg_g = DMatrix::from_column_slice(dim, 1, (-&g).as_slice());
            let step = chol.solve(&neg_g);
            let mut cand = x.clone();
            for (i, s) in slot.iter().enumerate() {
                if *s != usize::MAX {
                    let d = Vector6::from_iterator(step.column(0).rows(6 * s, 6).iter().copied());
                    cand[i] = x[i].perturb(&Twist::from_vector(&d));
                }
            }
            let c = total_cost(&cand, edges);
            if c <= cost {
                x = cand;
                cost = c;
                history.push(c);
                iterations += 1;
                lambda = (lambda * 0.1).max(1e-15);
                continue 'outer;
            }
            lambda *= 10.0;
        }
        // no improving step found: at a minimum up to numerics
        break;
    }
    Ok(GraphSolution {
        poses: x,
        iterations,
        initial_cost,
        final_cost: cost,
        history,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KeyframeParams {
    pub dist: f64,
    pub angle: f64,
    pub min_matches: usize,
}

impl Default for KeyframeParams {
    fn default() -> Self {
        Self {
            dist: 1.0,
            angle: 0.2,
            min_matches: 50,
        }
    }
}

pub fn maybe_keyframe(
    pose: &Se3Pose,
    last_kf: &Se3Pose,
    matched_count: usize,
    params: &KeyframeParams,
) -> bool {
    let (dt, da) = last_kf.distance_to(pose);
    dt > params.dist || da > params.angle || matched_count < params.min_matches
}

pub fn odometry_information() -> Matrix6<f64> {
    Matrix6::identity()
}

pub fn loop_information() -> Matrix6<f64> {
    Matrix6::identity() * 0.5
}

/// Vertices, edges and the fixed gauge vertex 0.
#[derive(Debug, Clone, Default)]
pub struct PoseGraph {
    pub params: GraphParams,
    poses: Vec<Se3Pose>,
    edges: Vec<GraphEdge>,
}

impl PoseGraph {
    pub fn new(params: GraphParams) -> Self {
        Self {
            params,
            poses: Vec::new(),
            edges: Vec::new(),
        }
    }

    pub fn poses(&self) -> &[Se3Pose] {
        &self.poses
    }

    pub fn edges(&self) -> &[GraphEdge] {
        &self.edges
    }

    pub fn len(&self) -> usize {
        self.poses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.poses.is_empty()
    }

    /// Adds a vertex linked to the previous one by the odometry between them.
    pub fn add_keyframe(&mut self, pose: Se3Pose) -> usize {
        let id = self.poses.len();
        if let Some(prev) = self.poses.last() {
            self.edges.push(GraphEdge {
                from: id - 1,
                to: id,
                relative: prev.between(&pose),
                information: odometry_information(),
                kind: EdgeKind::Odometry,
            });
        }
        self.poses.push(pose);
        id
    }

    pub fn add_edge(&mut self, edge: GraphEdge) {
        self.edges.push(edge);
    }

    pub fn optimize(&mut self) -> Result<GraphSolution, GraphError> {
        let fixed = BTreeSet::from([0]);
        let sol = optimize_graph(&self.poses, &self.edges, &fixed, &self.params)?;
        self.poses.clone_from(&sol.poses);
        Ok(sol)
    }

    /// Adds the verified loop, re-optimizes, and returns the correction
    /// `optimized_latest · previous_latest⁻¹`. On error the graph is left
    /// as it was.
    pub fn on_loop(&mut self, c: &LoopCandidate) -> Result<Se3Pose, GraphError> {
        let before = *self
            .poses
            .last()
            .ok_or_else(|| GraphError::InvalidInput("empty graph".into()))?;
        self.edges.push(GraphEdge {
            from: c.match_id,
            to: c.query_id,
            relative: c.relative.inverse(),
            information: loop_information(),
            kind: EdgeKind::Loop,
        });
        match self.optimize() {
            Ok(_) => Ok(self.poses.last().unwrap().compose(&before.inverse())),
            Err(e) => {
                self.edges.pop();
                Err(e)
            }
        }
    }

    /// Text dump with `VERTEX_SE3:QUAT` and `EDGE_SE3:QUAT` records. The 21
    /// information entries are the upper triangle in translation-first order.
    pub fn dump_g2o(&self) -> String {
        let mut s = String::new();
        let quat = |p: &Se3Pose| {
            let t = p.translation();
            let q = p.rotation().coords;
            format!("{} {} {} {} {} {} {}", t.x, t.y, t.z, q.x, q.y, q.z, q.w)
        };
        for (i, p) in self.poses.iter().enumerate() {
            let _ = writeln!(s, "VERTEX_SE3:QUAT {i} {}", quat(p));
        }
        // [rot, trans] -> [trans, rot]
        let perm = [3, 4, 5, 0, 1, 2];
        for e in &self.edges {
            let _ = write!(s, "EDGE_SE3:QUAT {} {} {}", e.from, e.to, quat(&e.relative));
            for r in 0..6 {
                for c in r..6 {
                    let _ = write!(s, " {}", e.information[(perm[r], perm[c])]);
                }
            }
            s.push('\n');
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Vec3;
    use nalgebra::{Matrix3, Matrix4};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn edge(from: usize, to: usize, relative: Se3Pose, info: Matrix6<f64>) -> GraphEdge {
        GraphEdge {
            from,
            to,
            relative,
            information: info,
            kind: EdgeKind::Odometry,
        }
    }

    #[test]
    fn consistent_chain_is_unchanged() {
        let poses = vec![
            Se3Pose::identity(),
            Se3Pose::from_translation(Vec3::new(1.0, 0.0, 0.0)),
            Se3Pose::rot_z(0.3).compose(&Se3Pose::from_translation(Vec3::new(2.0, 0.5, 0.0))),
        ];
        let edges: Vec<GraphEdge> = (0..2)
            .map(|i| {
                edge(
                    i,
                    i + 1,
                    poses[i].between(&poses[i + 1]),
                    Matrix6::identity(),
                )
            })
            .collect();
        for e in &edges {
            assert!(e.residual(&poses[e.from], &poses[e.to]).norm() < 1e-15);
        }
        let sol = optimize_graph(
            &poses,
            &edges,
            &BTreeSet::from([0]),
            &GraphParams::default(),
        )
        .unwrap();
        assert!(sol.final_cost < 1e-24);
        for (a, b) in sol.poses.iter().zip(&poses) {
            let (dt, da) = a.distance_to(b);
            assert!(dt < 1e-12 && da < 1e-12);
        }
    }

    #[test]
    fn disconnected_and_bad_information() {
        let poses = vec![Se3Pose::identity(); 4];
        let e = vec![
            edge(0, 1, Se3Pose::identity(), Matrix6::identity()),
            edge(2, 3, Se3Pose::identity(), Matrix6::identity()),
        ];
        assert_eq!(
            optimize_graph(&poses, &e, &BTreeSet::from([0]), &GraphParams::default()),
            Err(GraphError::DisconnectedGraph(2))
        );
        let mut bad = Matrix6::identity();
        bad[(0, 0)] = -1.0;
        let e = vec![edge(0, 1, Se3Pose::identity(), bad)];
        assert_eq!(
            optimize_graph(
                &poses[..2],
                &e,
                &BTreeSet::from([0]),
                &GraphParams::default()
            ),
            Err(GraphError::NotPositiveDefinite(0))
        );
    }

    #[test]
    fn keyframe_decisions() {
        let p = KeyframeParams::default();
        let kf = Se3Pose::identity();
        assert!(maybe_keyframe(
            &Se3Pose::from_translation(Vec3::new(1.5, 0.0, 0.0)),
            &kf,
            200,
            &p
        ));
        let small =
            Se3Pose::rot_z(0.05).compose(&Se3Pose::from_translation(Vec3::new(0.1, 0.0, 0.0)));
        assert!(!maybe_keyframe(&small, &kf, 180, &p));
        assert!(maybe_keyframe(&kf, &kf, 30, &p));
    }

    // ---- independent dense oracle: homogeneous matrices, right perturbation ----

    fn hat3(w: &Vec3) -> Matrix3<f64> {
        Matrix3::new(0.0, -w.z, w.y, w.z, 0.0, -w.x, -w.y, w.x, 0.0)
    }

    fn exp_m(xi: &Vector6<f64>) -> Matrix4<f64> {
        let w = Vec3::new(xi[0], xi[1], xi[2]);
        let v = Vec3::new(xi[3], xi[4], xi[5]);
        let th = w.norm();
        let k = hat3(&w);
        let (a, b, c) = if th < 1e-8 {
            (
                1.0 - th * th / 6.0,
                0.5 - th * th / 24.0,
                1.0 / 6.0 - th * th / 120.0,
            )
        } else {
            (
                th.sin() / th,
                (1.0 - th.cos()) / (th * th),
                (th - th.sin()) / (th * th * th),
            )
        };
        let r = Matrix3::identity() + k * a + k * k * b;
        let vm = Matrix3::identity() + k * b + k * k * c;
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&r);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&(vm * v));
        m
    }

    fn log_m(m: &Matrix4<f64>) -> Vector6<f64> {
        let r: Matrix3<f64> = m.fixed_view::<3, 3>(0, 0).into_owned();
        let t: Vec3 = m.fixed_view::<3, 1>(0, 3).into_owned();
        let cos = ((r.trace() - 1.0) / 2.0).clamp(-1.0, 1.0);
        let th = cos.acos();
        let s = if th < 1e-8 {
            0.5 + th * th / 12.0
        } else {
            th / (2.0 * th.sin())
        };
        let wm = (r - r.transpose()) * s;
        let w = Vec3::new(wm[(2, 1)], wm[(0, 2)], wm[(1, 0)]);
        let k = hat3(&w);
        let c = if th < 1e-8 {
            1.0 / 12.0
        } else {
            (1.0 - th * th.sin() / (2.0 * (1.0 - th.cos()))) / (th * th)
        };
        let vinv = Matrix3::identity() - k * 0.5 + k * k * c;
        let v = vinv * t;
        Vector6::new(w.x, w.y, w.z, v.x, v.y, v.z)
    }

    fn inv_m(m: &Matrix4<f64>) -> Matrix4<f64> {
        m.try_inverse().unwrap()
    }

    fn dense_oracle(poses: &[Se3Pose], edges: &[GraphEdge]) -> f64 {
        let mut x: Vec<Matrix4<f64>> = poses.iter().map(|p| p.to_matrix()).collect();
        let zs: Vec<Matrix4<f64>> = edges
            .iter()
            .map(|e| inv_m(&e.relative.to_matrix()))
            .collect();
        let res = |x: &[Matrix4<f64>]| -> DVector<f64> {
            let mut r = DVector::zeros(6 * edges.len());
            for (k, e) in edges.iter().enumerate() {
                let l = e.information.cholesky().unwrap().l().transpose();
                let v = l * log_m(&(zs[k] * inv_m(&x[e.from]) * x[e.to]));
                r.rows_mut(6 * k, 6).copy_from(&v);
            }
            r
        };
        let n = x.len() - 1;
        for _ in 0..100 {
            let r0 = res(&x);
            let mut j = DMatrix::zeros(r0.len(), 6 * n);
            for i in 0..n {
                for k in 0..6 {
                    let mut d = Vector6::zeros();
                    d[k] = 1e-6;
                    let mut xp = x.clone();
                    let mut xm = x.clone();
                    xp[i + 1] = x[i + 1] * exp_m(&d);
                    xm[i + 1] = x[i + 1] * exp_m(&(-d));
                    j.set_column(6 * i + k, &((res(&xp) - res(&xm)) / 2e-6));
                }
            }
            let step = (j.transpose() * &j)
                .lu()
                .solve(&(-(j.transpose() * &r0)))
                .unwrap();
            for i in 0..n {
                let d = Vector6::from_iterator(step.rows(6 * i, 6).iter().copied());
                x[i + 1] *= exp_m(&d);
            }
            if step.norm() < 1e-13 {
                break;
            }
        }
        res(&x).norm_squared()
    }

    fn drifting_loop(rng: &mut ChaCha8Rng, n: usize, drift: f64) -> (Vec<Se3Pose>, Vec<GraphEdge>) {
        // true poses on a square, odometry slightly biased
        let mut truth = vec![Se3Pose::identity()];
        for i in 1..n {
            let step = Se3Pose::rot_z(std::f64::consts::TAU / n as f64)
                .compose(&Se3Pose::from_translation(Vec3::new(1.0, 0.0, 0.0)));
            truth.push(truth[i - 1].compose(&step));
        }
        let mut edges = Vec::new();
        let mut est = vec![Se3Pose::identity()];
        for i in 0..n - 1 {
            let noise = Twist::new(
                Vec3::new(
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                ) * drift,
                Vec3::new(
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                ) * drift,
            );
            let meas = truth[i].between(&truth[i + 1]).perturb(&noise);
            edges.push(edge(i, i + 1, meas, odometry_information()));
            est.push(est[i].compose(&meas));
        }
        edges.push(GraphEdge {
            from: n - 1,
            to: 0,
            relative: truth[n - 1].between(&truth[0]),
            information: loop_information(),
            kind: EdgeKind::Loop,
        });
        (est, edges)
    }

    #[test]
    fn matches_dense_oracle_on_small_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for n in [4usize, 6, 8, 10] {
            let (init, edges) = drifting_loop(&mut rng, n, 0.01);
            let sol = optimize_graph(&init, &edges, &BTreeSet::from([0]), &GraphParams::default())
                .unwrap();
            let oracle = dense_oracle(&init, &edges);
            assert!(
                (sol.final_cost - oracle).abs() < 1e-9,
                "n={n}: {} vs {oracle}",
                sol.final_cost
            );
            assert!(sol.final_cost <= sol.initial_cost);
            for w in sol.history.windows(2) {
                assert!(w[1] <= w[0]);
            }
        }
    }

    #[test]
    fn square_with_identity_loop_edge() {
        // walk a unit square back to the start; the edges are exact but the
        // initial vertex estimates have accumulated 1 cm of drift
        let step = Se3Pose::from_translation(Vec3::new(1.0, 0.0, 0.0))
            .compose(&Se3Pose::rot_z(std::f64::consts::FRAC_PI_2));
        let mut poses = vec![Se3Pose::identity()];
        let mut edges = Vec::new();
        let mut truth = Se3Pose::identity();
        for i in 0..4 {
            edges.push(edge(i, i + 1, step, Matrix6::identity()));
            truth = truth.compose(&step);
            let drift = Se3Pose::from_translation(Vec3::new(0.0025 * (i + 1) as f64, 0.0, 0.0));
            poses.push(drift.compose(&truth));
        }
        edges.push(edge(4, 0, Se3Pose::identity(), Matrix6::identity()));
        assert!((poses[4].distance_to(&poses[0]).0 - 0.01).abs() < 1e-3);
        let sol = optimize_graph(
            &poses,
            &edges,
            &BTreeSet::from([0]),
            &GraphParams::default(),
        )
        .unwrap();
        let oracle = dense_oracle(&poses, &edges);
        assert!((sol.final_cost - oracle).abs() < 1e-9);
        let e = edges[4].residual(&sol.poses[4], &sol.poses[0]);
        assert!(e.norm() < 1e-6, "{}", e.norm());
        assert!(sol.poses[4].distance_to(&sol.poses[0]).0 < 1e-6);
    }

    #[test]
    fn biased_measurement_is_spread_evenly() {
        // one odometry edge is off by 1 cm; with equal weights every edge of
        // the cycle absorbs a fifth of it
        let step = Se3Pose::from_translation(Vec3::new(1.0, 0.0, 0.0))
            .compose(&Se3Pose::rot_z(std::f64::consts::FRAC_PI_2));
        let mut poses = vec![Se3Pose::identity()];
        let mut edges = Vec::new();
        for i in 0..4 {
            let meas = if i == 2 {
                step.compose(&Se3Pose::from_translation(Vec3::new(0.01, 0.0, 0.0)))
            } else {
                step
            };
            edges.push(edge(i, i + 1, meas, Matrix6::identity()));
            poses.push(poses[i].compose(&meas));
        }
        edges.push(edge(4, 0, Se3Pose::identity(), Matrix6::identity()));
        let sol = optimize_graph(
            &poses,
            &edges,
            &BTreeSet::from([0]),
            &GraphParams::default(),
        )
        .unwrap();
        assert!((sol.final_cost - dense_oracle(&poses, &edges)).abs() < 1e-9);
        for e in &edges {
            let r = e.residual(&sol.poses[e.from], &sol.poses[e.to]).norm();
            assert!(r > 0.001 && r < 0.003, "{r}");
        }
    }

    #[test]
    fn gauge_transform_commutes() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (init, edges) = drifting_loop(&mut rng, 8, 0.02);
        let g = Se3Pose::from_axis_angle(&Vec3::new(0.3, -0.2, 1.0), 0.7)
            .compose(&Se3Pose::from_translation(Vec3::new(3.0, -1.0, 2.0)));
        let moved: Vec<Se3Pose> = init.iter().map(|p| g.compose(p)).collect();
        let fixed = BTreeSet::from([0]);
        let a = optimize_graph(&init, &edges, &fixed, &GraphParams::default()).unwrap();
        let b = optimize_graph(&moved, &edges, &fixed, &GraphParams::default()).unwrap();
        for (pa, pb) in a.poses.iter().zip(&b.poses) {
            let (dt, da) = g.compose(pa).distance_to(pb);
            assert!(dt < 1e-8 && da < 1e-8, "{dt} {da}");
        }
    }

    #[test]
    fn redundant_loop_leaves_poses_and_rejection_leaves_graph() {
        let mut g = PoseGraph::new(GraphParams::default());
        let mut p = Se3Pose::identity();
        for i in 0..5 {
            g.add_keyframe(p);
            p = p.compose(
                &Se3Pose::rot_z(0.1 * i as f64)
                    .compose(&Se3Pose::from_translation(Vec3::new(1.0, 0.2, 0.0))),
            );
        }
        let before = g.poses().to_vec();
        let c = LoopCandidate {
            query_id: 4,
            match_id: 0,
            similarity: 1.0,
            relative: before[4].between(&before[0]),
            inlier_count: 100,
            mean_residual: 0.0,
        };
        let dt = g.on_loop(&c).unwrap();
        assert!(dt.distance_to(&Se3Pose::identity()).0 < 1e-9);
        for (a, b) in g.poses().iter().zip(&before) {
            assert!(a.distance_to(b).0 < 1e-9);
        }
        let edges = g.edges().len();
        let bad = LoopCandidate { match_id: 99, ..c };
        assert!(g.on_loop(&bad).is_err());
        assert_eq!(g.edges().len(), edges);
        let dump = g.dump_g2o();
        assert_eq!(
            dump.lines()
                .filter(|l| l.starts_with("VERTEX_SE3:QUAT"))
                .count(),
            5
        );
        let e = dump
            .lines()
            .find(|l| l.starts_with("EDGE_SE3:QUAT"))
            .unwrap();
        assert_eq!(e.split_whitespace().count(), 1 + 2 + 7 + 21);
    }
}
