//! Three-stage SLAM pipeline: intensity odometry, map optimization and the
//! keyframe pose graph.
//!
//! Stages communicate only through ordered messages, so the serial and the
//! pipelined (threaded) modes produce identical results.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::{debug, info, warn};
use thiserror::Error;

use crate::config::Config;
use crate::exec::Exec;
use crate::features::{DetectorParams, Feature, IntensityFrame, MatchParams};
use crate::geometry::{Se3Pose, Vec3};
use crate::image::{IntensityImage, NormalizationParams};
use crate::loop_closure::{
    LoopCandidate, LoopDetector, LoopError, LoopParams, VerifyParams, Vocabulary,
};
use crate::mapping::{MapOptimizer, MapParams};
use crate::odometry::{Odometry, OdometryEstimate, RegistrationParams};
use crate::planes::{extract_planes, PlaneParams};
use crate::pose_graph::{maybe_keyframe, GraphParams, KeyframeParams, PoseGraph};
use crate::scan::{read_scan, write_trajectory, OrganizedScan, ScanIoError, TrajectoryRecord};

const QUEUE_DEPTH: usize = 4;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("no scans in {0}")]
    EmptyInput(String),
    #[error(transparent)]
    Scan(#[from] ScanIoError),
    #[error(transparent)]
    Vocabulary(#[from] LoopError),
    #[error("{0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PipelineMode {
    #[default]
    Serial,
    /// One thread per stage, joined by bounded queues.
    Parallel,
}

impl std::str::FromStr for PipelineMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "serial" => Ok(PipelineMode::Serial),
            "parallel" => Ok(PipelineMode::Parallel),
            _ => Err(format!("unknown pipeline mode '{s}' (serial, parallel)")),
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub mode: PipelineMode,
    /// Data parallelism inside stages.
    pub exec: Option<Exec>,
    /// Loop closure is disabled without a vocabulary.
    pub vocabulary: Option<Vocabulary>,
}

/// Per-scan output.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameRecord {
    pub index: usize,
    pub timestamp: f64,
    /// Pure intensity-odometry integration.
    pub odometry: Se3Pose,
    /// Result of map optimization, in the map frame.
    pub mapped: Se3Pose,
    /// `mapped` with the configured drift applied; equal to it by default.
    pub drifted: Se3Pose,
    /// `drifted` with the loop correction known when the scan was processed.
    pub published: Se3Pose,
    /// Latest keyframe at or before this scan.
    pub anchor: usize,
    pub low_confidence: bool,
    pub unconstrained: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct KeyframeRecord {
    pub id: usize,
    pub frame: usize,
    pub timestamp: f64,
    /// Pose entered into the graph, including earlier loop corrections.
    pub initial: Se3Pose,
    pub drifted: Se3Pose,
}

#[derive(Debug, Clone, Default)]
pub struct StageStats {
    pub samples: Vec<f64>,
}

impl StageStats {
    pub fn push(&mut self, ms: f64) {
        self.samples.push(ms);
    }

    pub fn mean(&self) -> f64 {
        if self.samples.is_empty() {
            0.0
        } else {
            self.samples.iter().sum::<f64>() / self.samples.len() as f64
        }
    }

    pub fn median(&self) -> f64 {
        let mut v = self.samples.clone();
        v.sort_by(f64::total_cmp);
        match v.len() {
            0 => 0.0,
            n if n % 2 == 1 => v[n / 2],
            n => 0.5 * (v[n / 2 - 1] + v[n / 2]),
        }
    }

    pub fn max(&self) -> f64 {
        self.samples.iter().copied().fold(0.0, f64::max)
    }
}

#[derive(Debug, Clone, Default)]
pub struct Timings {
    /// Image projection, features and registration.
    pub front_end: StageStats,
    pub planes: StageStats,
    pub mapping: StageStats,
    pub pose_graph: StageStats,
    pub total: StageStats,
    pub wall_ms: f64,
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub frames: Vec<FrameRecord>,
    pub keyframes: Vec<KeyframeRecord>,
    /// Keyframe poses after the last graph optimization.
    pub graph_poses: Vec<Se3Pose>,
    pub loops: Vec<LoopCandidate>,
    pub rejected_loops: usize,
    pub odometry_fallbacks: usize,
    pub map_points: Vec<Vec3>,
    pub graph_dump: String,
    pub timings: Timings,
    pub mode: PipelineMode,
}

fn records(
    frames: &[FrameRecord],
    pose: impl Fn(&FrameRecord) -> Se3Pose,
) -> Vec<TrajectoryRecord> {
    frames
        .iter()
        .map(|f| TrajectoryRecord::new(f.timestamp, pose(f)))
        .collect()
}

impl RunOutput {
    pub fn odometry_trajectory(&self) -> Vec<TrajectoryRecord> {
        records(&self.frames, |f| f.odometry)
    }

    /// Poses as published online, one per scan.
    pub fn mapping_trajectory(&self) -> Vec<TrajectoryRecord> {
        records(&self.frames, |f| f.published)
    }

    /// Every scan re-anchored on its optimized keyframe.
    pub fn final_trajectory(&self) -> Vec<TrajectoryRecord> {
        records(&self.frames, |f| {
            let kf = &self.keyframes[f.anchor];
            self.graph_poses[f.anchor].compose(&kf.drifted.between(&f.drifted))
        })
    }

    pub fn keyframe_trajectory(&self) -> Vec<TrajectoryRecord> {
        self.keyframes
            .iter()
            .zip(&self.graph_poses)
            .map(|(k, p)| TrajectoryRecord::new(k.timestamp, *p))
            .collect()
    }

    /// Keyframe poses without any loop correction.
    pub fn keyframe_open_loop_trajectory(&self) -> Vec<TrajectoryRecord> {
        self.keyframes
            .iter()
            .map(|k| TrajectoryRecord::new(k.timestamp, k.drifted))
            .collect()
    }

    pub fn low_confidence_count(&self) -> usize {
        self.frames.iter().filter(|f| f.low_confidence).count()
    }

    pub fn summary(&self) -> String {
        let mut s = String::new();
        let mode = match self.mode {
            PipelineMode::Serial => "serial",
            PipelineMode::Parallel => "parallel",
        };
        let _ = writeln!(s, "mode: {mode}");
        let _ = writeln!(s, "scans: {}", self.frames.len());
        let _ = writeln!(s, "keyframes: {}", self.keyframes.len());
        let _ = writeln!(s, "loops_accepted: {}", self.loops.len());
        let _ = writeln!(s, "loops_rejected: {}", self.rejected_loops);
        for l in &self.loops {
            let _ = writeln!(
                s,
                "loop: keyframe {} -> {} similarity {:.3} inliers {}",
                l.match_id, l.query_id, l.similarity, l.inlier_count
            );
        }
        let _ = writeln!(s, "odometry_fallbacks: {}", self.odometry_fallbacks);
        let _ = writeln!(s, "low_confidence_frames: {}", self.low_confidence_count());
        let _ = writeln!(
            s,
            "unconstrained_map_frames: {}",
            self.frames.iter().filter(|f| f.unconstrained).count()
        );
        let _ = writeln!(s, "map_points: {}", self.map_points.len());
        let _ = writeln!(
            s,
            "{:<12} {:>10} {:>10} {:>10}",
            "stage_ms", "mean", "median", "max"
        );
        let t = &self.timings;
        for (name, st) in [
            ("front_end", &t.front_end),
            ("planes", &t.planes),
            ("mapping", &t.mapping),
            ("pose_graph", &t.pose_graph),
            ("total", &t.total),
        ] {
            let _ = writeln!(
                s,
                "{:<12} {:>10.3} {:>10.3} {:>10.3}",
                name,
                st.mean(),
                st.median(),
                st.max()
            );
        }
        let per_scan = if self.frames.is_empty() {
            0.0
        } else {
            t.wall_ms / self.frames.len() as f64
        };
        let _ = writeln!(s, "wall_ms_per_scan: {per_scan:.3}");
        s
    }

    /// Writes trajectories, the map dump, the graph dump and the summary.
    pub fn write_outputs(&self, dir: impl AsRef<Path>) -> Result<(), PipelineError> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        write_trajectory(&self.odometry_trajectory(), dir.join("odometry.txt"))?;
        write_trajectory(&self.mapping_trajectory(), dir.join("mapping.txt"))?;
        write_trajectory(&self.keyframe_trajectory(), dir.join("keyframes.txt"))?;
        write_trajectory(
            &self.keyframe_open_loop_trajectory(),
            dir.join("keyframes_open_loop.txt"),
        )?;
        write_trajectory(&self.final_trajectory(), dir.join("trajectory.txt"))?;
        let mut xyz = String::with_capacity(self.map_points.len() * 32);
        for p in &self.map_points {
            let _ = writeln!(xyz, "{} {} {}", p.x, p.y, p.z);
        }
        std::fs::write(dir.join("map.xyz"), xyz)?;
        std::fs::write(dir.join("graph.g2o"), &self.graph_dump)?;
        std::fs::write(dir.join("summary.txt"), self.summary())?;
        Ok(())
    }
}

fn ms(t: Instant) -> f64 {
    t.elapsed().as_secs_f64() * 1e3
}

struct FrontOut {
    index: usize,
    scan: OrganizedScan,
    features: Vec<Feature>,
    estimate: Option<OdometryEstimate>,
    odometry: Se3Pose,
    ms: f64,
}

struct FrontEnd {
    norm: NormalizationParams,
    detector: DetectorParams,
    odometry: Odometry,
    prev: Option<IntensityFrame>,
    pose: Se3Pose,
}

impl FrontEnd {
    fn new(cfg: &Config, exec: Exec) -> Self {
        let match_params = MatchParams {
            max_hamming: cfg.max_hamming,
            ratio: cfg.match_ratio,
        };
        let registration = RegistrationParams {
            min_matches: cfg.min_matches,
            ..Default::default()
        };
        Self {
            norm: NormalizationParams {
                cap: cfg.intensity_cap,
                gain_equalization: cfg.gain_equalization,
            },
            detector: DetectorParams {
                threshold: cfg.fast_threshold,
                cap: cfg.feature_cap,
                max_range: cfg.feature_max_range,
                exec,
            },
            odometry: Odometry::new(match_params, registration),
            prev: None,
            pose: Se3Pose::identity(),
        }
    }

    fn step(&mut self, index: usize, scan: OrganizedScan) -> FrontOut {
        let t0 = Instant::now();
        let frame = IntensityFrame::build(&scan, &self.norm, &self.detector).unwrap_or_else(|e| {
            warn!("scan {index}: no intensity image ({e}); frame has no features");
            IntensityFrame {
                timestamp: scan.timestamp,
                image: IntensityImage::from_pixels(scan.rows(), scan.cols(), vec![0; scan.len()]),
                features: Vec::new(),
            }
        });
        let estimate = self.prev.as_ref().map(|p| self.odometry.advance(p, &frame));
        if let Some(e) = &estimate {
            self.pose = self.pose.compose(&e.motion());
        }
        let features = frame.features.clone();
        self.prev = Some(frame);
        FrontOut {
            index,
            scan,
            features,
            estimate,
            odometry: self.pose,
            ms: ms(t0),
        }
    }
}

struct MapOut {
    index: usize,
    timestamp: f64,
    features: Vec<Feature>,
    odometry: Se3Pose,
    mapped: Se3Pose,
    matched: usize,
    low_confidence: bool,
    unconstrained: bool,
    front_ms: f64,
    planes_ms: f64,
    map_ms: f64,
}

struct Mapper {
    optimizer: MapOptimizer,
    planes: PlaneParams,
    use_odometry: bool,
    last: Option<Se3Pose>,
}

impl Mapper {
    fn new(cfg: &Config, exec: Exec) -> Self {
        let params = MapParams {
            window: cfg.ba_window,
            local_map_radius: cfg.local_map_radius,
            use_ba: cfg.use_ba,
            match_params: MatchParams {
                max_hamming: cfg.max_hamming,
                ratio: cfg.match_ratio,
            },
            exec,
            ..Default::default()
        };
        Self {
            optimizer: MapOptimizer::new(params),
            planes: PlaneParams {
                per_sector: cfg.plane_per_sector,
                ground_voxel: cfg.ground_voxel,
                height_prior: cfg.height_prior,
                ransac_iterations: cfg.ransac_iterations,
                ransac_seed: cfg.ransac_seed,
            },
            use_odometry: cfg.use_intensity_odometry,
            last: None,
        }
    }

    fn step(&mut self, f: FrontOut) -> MapOut {
        let t0 = Instant::now();
        let planes = extract_planes(&f.scan, &self.planes);
        let planes_ms = ms(t0);
        let t1 = Instant::now();
        let init = match (self.last, &f.estimate) {
            (None, _) => Se3Pose::identity(),
            (Some(last), Some(e)) if self.use_odometry => last.compose(&e.motion()),
            (Some(last), _) => last,
        };
        let report = self
            .optimizer
            .process(&init, &f.features, &planes.points, f.scan.timestamp);
        let mapped = if report.pose.is_finite() {
            report.pose
        } else {
            init
        };
        self.last = Some(mapped);
        debug!(
            "scan {}: {} plane / {} ba residuals, {} iterations",
            f.index, report.plane_associations, report.ba_correspondences, report.iterations
        );
        MapOut {
            index: f.index,
            timestamp: f.scan.timestamp,
            features: f.features,
            odometry: f.odometry,
            mapped,
            matched: f.estimate.as_ref().map_or(usize::MAX, |e| e.inlier_count),
            low_confidence: f.estimate.as_ref().is_some_and(|e| e.low_confidence),
            unconstrained: report.unconstrained,
            front_ms: f.ms,
            planes_ms,
            map_ms: ms(t1),
        }
    }
}

struct Backend {
    graph: PoseGraph,
    detector: Option<LoopDetector>,
    kf_params: KeyframeParams,
    drift: Se3Pose,
    correction: Se3Pose,
    prev: Option<(Se3Pose, Se3Pose)>,
    last_features: Vec<Feature>,
    frames: Vec<FrameRecord>,
    keyframes: Vec<KeyframeRecord>,
    loops: Vec<LoopCandidate>,
    timings: Timings,
}

impl Backend {
    fn new(cfg: &Config, vocabulary: Option<Vocabulary>) -> Self {
        let detector = vocabulary.map(|v| {
            LoopDetector::new(
                v,
                LoopParams {
                    gap: cfg.loop_gap,
                    threshold: cfg.loop_sim_threshold,
                    top_n: 1,
                    verify: VerifyParams {
                        min_inliers: cfg.loop_min_inliers,
                        max_residual: cfg.loop_max_residual,
                        match_params: MatchParams {
                            max_hamming: cfg.max_hamming,
                            ratio: cfg.match_ratio,
                        },
                        registration: RegistrationParams {
                            min_matches: cfg.min_matches,
                            ..Default::default()
                        },
                    },
                },
            )
        });
        Self {
            graph: PoseGraph::new(GraphParams::default()),
            detector,
            kf_params: KeyframeParams {
                dist: cfg.kf_dist,
                angle: cfg.kf_angle,
                min_matches: cfg.kf_min_matches,
            },
            drift: Se3Pose::from_translation(Vec3::new(cfg.drift_trans_per_scan, 0.0, 0.0))
                .compose(&Se3Pose::rot_z(cfg.drift_yaw_per_scan)),
            correction: Se3Pose::identity(),
            prev: None,
            last_features: Vec::new(),
            frames: Vec::new(),
            keyframes: Vec::new(),
            loops: Vec::new(),
            timings: Timings::default(),
        }
    }

    fn add_keyframe(&mut self, frame: usize, features: &[Feature]) {
        let rec = &self.frames[frame];
        let initial = self.correction.compose(&rec.drifted);
        let id = self.graph.add_keyframe(initial);
        self.keyframes.push(KeyframeRecord {
            id,
            frame,
            timestamp: rec.timestamp,
            initial,
            drifted: rec.drifted,
        });
        self.frames[frame].anchor = id;
        let Some(det) = self.detector.as_mut() else {
            return;
        };
        if let Some(c) = det.process(id, features) {
            match self.graph.on_loop(&c) {
                Ok(delta) => {
                    info!(
                        "loop closed: keyframe {} -> {} (similarity {:.3}, {} inliers)",
                        c.match_id, c.query_id, c.similarity, c.inlier_count
                    );
                    self.correction = delta.compose(&self.correction);
                    self.loops.push(c);
                }
                Err(e) => warn!(
                    "loop {} -> {} rejected by the graph: {e}",
                    c.match_id, c.query_id
                ),
            }
        }
    }

    fn step(&mut self, m: MapOut) {
        let t0 = Instant::now();
        let drifted = match self.prev {
            None => m.mapped,
            Some((prev_mapped, prev_drifted)) => prev_drifted
                .compose(&prev_mapped.between(&m.mapped))
                .compose(&self.drift),
        };
        self.prev = Some((m.mapped, drifted));
        let index = self.frames.len();
        debug_assert_eq!(index, m.index);
        let anchor = self.keyframes.len().saturating_sub(1);
        self.frames.push(FrameRecord {
            index,
            timestamp: m.timestamp,
            odometry: m.odometry,
            mapped: m.mapped,
            drifted,
            published: Se3Pose::identity(),
            anchor,
            low_confidence: m.low_confidence,
            unconstrained: m.unconstrained,
        });
        let is_kf = match self.keyframes.last() {
            None => true,
            Some(k) => maybe_keyframe(&drifted, &k.drifted, m.matched, &self.kf_params),
        };
        if is_kf {
            self.add_keyframe(index, &m.features);
        }
        self.frames[index].published = self.correction.compose(&drifted);
        self.last_features = m.features;
        let graph_ms = ms(t0);
        let t = &mut self.timings;
        t.front_end.push(m.front_ms);
        t.planes.push(m.planes_ms);
        t.mapping.push(m.map_ms);
        t.pose_graph.push(graph_ms);
        t.total.push(m.front_ms + m.planes_ms + m.map_ms + graph_ms);
    }

    /// Promotes the final scan to a keyframe so the trajectory end takes part
    /// in loop detection.
    fn finish(&mut self) {
        let Some(last) = self.frames.last() else {
            return;
        };
        let i = last.index;
        if self.keyframes.last().is_some_and(|k| k.frame != i) {
            let feats = std::mem::take(&mut self.last_features);
            self.add_keyframe(i, &feats);
            self.frames[i].published = self.correction.compose(&self.frames[i].drifted);
        }
    }
}

/// Runs the pipeline over scans in time order.
pub fn run_scans<I>(scans: I, cfg: &Config, opts: &RunOptions) -> Result<RunOutput, PipelineError>
where
    I: IntoIterator<Item = Result<OrganizedScan, ScanIoError>>,
    I::IntoIter: Send,
{
    let exec = opts.exec.unwrap_or(match opts.mode {
        PipelineMode::Serial => Exec::Serial,
        PipelineMode::Parallel => Exec::default(),
    });
    if opts.vocabulary.is_none() {
        warn!("no vocabulary configured; loop closure disabled");
    }
    let mut front = FrontEnd::new(cfg, exec);
    let mut mapper = Mapper::new(cfg, exec);
    let mut back = Backend::new(cfg, opts.vocabulary.clone());
    let start = Instant::now();
    match opts.mode {
        PipelineMode::Serial => {
            for (i, scan) in scans.into_iter().enumerate() {
                let f = front.step(i, scan?);
                back.step(mapper.step(f));
            }
        }
        PipelineMode::Parallel => {
            let (tx_f, rx_f) = crossbeam_channel::bounded::<FrontOut>(QUEUE_DEPTH);
            let (tx_m, rx_m) = crossbeam_channel::bounded::<MapOut>(QUEUE_DEPTH);
            let iter = scans.into_iter();
            let front_result = std::thread::scope(|s| {
                let front_ref = &mut front;
                let producer = s.spawn(move || -> Result<(), ScanIoError> {
                    for (i, scan) in iter.enumerate() {
                        if tx_f.send(front_ref.step(i, scan?)).is_err() {
                            break;
                        }
                    }
                    Ok(())
                });
                let mapper_ref = &mut mapper;
                s.spawn(move || {
                    for f in rx_f {
                        if tx_m.send(mapper_ref.step(f)).is_err() {
                            break;
                        }
                    }
                });
                for m in rx_m {
                    back.step(m);
                }
                producer.join().expect("front-end thread panicked")
            });
            front_result?;
        }
    }
    if back.frames.is_empty() {
        return Err(PipelineError::EmptyInput("input".into()));
    }
    back.finish();
    back.timings.wall_ms = ms(start);
    Ok(RunOutput {
        graph_poses: back.graph.poses().to_vec(),
        graph_dump: back.graph.dump_g2o(),
        rejected_loops: back.detector.as_ref().map_or(0, |d| d.rejected),
        odometry_fallbacks: front.odometry.fallback_count(),
        map_points: mapper.optimizer.map_points(),
        frames: back.frames,
        keyframes: back.keyframes,
        loops: back.loops,
        timings: back.timings,
        mode: opts.mode,
    })
}

/// Scan files of a directory in lexicographic order.
pub fn list_scans(dir: impl AsRef<Path>) -> Result<Vec<PathBuf>, PipelineError> {
    let dir = dir.as_ref();
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "oscn"))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(PipelineError::EmptyInput(dir.display().to_string()));
    }
    Ok(files)
}

pub fn run_dir(
    dir: impl AsRef<Path>,
    cfg: &Config,
    opts: &RunOptions,
) -> Result<RunOutput, PipelineError> {
    let files = list_scans(dir)?;
    run_scans(files.into_iter().map(read_scan), cfg, opts)
}
