use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use intensity_slam::exec::Exec;
use intensity_slam::features::fast::detect_corners;
use intensity_slam::geometry::{Se3Pose, Vec3};
use intensity_slam::ikd::IkdTree;
use intensity_slam::image::{project, NormalizationParams};
use intensity_slam::synth::{corridor_world, render_scan_with, SensorModel};

const MODES: [(&str, Exec); 2] = [("serial", Exec::Serial), ("parallel", Exec::Parallel)];

fn render(c: &mut Criterion) {
    let world = corridor_world();
    let sensor = SensorModel::default();
    let pose = Se3Pose::identity();
    let mut g = c.benchmark_group("render_scan");
    g.sample_size(10);
    for (name, exec) in MODES {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| render_scan_with(&world, &sensor, &pose, 1, exec))
        });
    }
    g.finish();
}

fn corners(c: &mut Criterion) {
    let scan = render_scan_with(
        &corridor_world(),
        &SensorModel::default(),
        &Se3Pose::identity(),
        1,
        Exec::Serial,
    );
    let img = project(&scan, &NormalizationParams::default()).unwrap();
    let mut g = c.benchmark_group("detect_corners");
    for (name, exec) in MODES {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| detect_corners(&img, 20, exec))
        });
    }
    g.finish();
}

fn knn(c: &mut Criterion) {
    let pts: Vec<Vec3> = (0..20_000)
        .map(|i| {
            let t = i as f64;
            Vec3::new(
                (t * 0.618).fract() * 40.0,
                (t * 0.414).fract() * 40.0,
                (t * 0.732).fract() * 4.0,
            )
        })
        .collect();
    let tree = IkdTree::build(&pts);
    let queries: Vec<Vec3> = pts
        .iter()
        .step_by(10)
        .map(|p| p + Vec3::new(0.01, -0.02, 0.03))
        .collect();
    let mut g = c.benchmark_group("knn_batch");
    for (name, exec) in MODES {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| tree.knn_batch(&queries, 5, exec))
        });
    }
    g.finish();
}

criterion_group!(benches, render, corners, knn);
criterion_main!(benches);
