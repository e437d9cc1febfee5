use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use std::hint::black_box;

use curvesketch_core::curves::init_sketch;
use curvesketch_core::motion::{flatten_view, MotionModel};
use curvesketch_core::projection::{OrthoPlane, ViewKind, Viewpoint};
use curvesketch_core::rasterizer::{backward, render_view, RasterParams};

fn bench_render(c: &mut Criterion) {
    let sketch = init_sketch(16, 0, 0.2, 0.001, 0.01).unwrap();
    let params = RasterParams::default();
    let mut group = c.benchmark_group("render_view");
    for size in [64, 256, 512] {
        let vp = Viewpoint::canonical(ViewKind::Front, size).unwrap();
        group.bench_with_input(BenchmarkId::from_parameter(size), &vp, |b, vp| {
            b.iter(|| render_view(black_box(&sketch), vp, &params).unwrap())
        });
    }
    group.finish();
}

fn bench_backward(c: &mut Criterion) {
    let sketch = init_sketch(16, 0, 0.2, 0.001, 0.01).unwrap();
    let params = RasterParams::default();
    let mut group = c.benchmark_group("backward");
    for size in [64, 256, 512] {
        let vp = Viewpoint::canonical(ViewKind::Front, size).unwrap();
        let (img, tape) = render_view(&sketch, &vp, &params).unwrap();
        let upstream: Vec<f64> = img.data.iter().map(|v| v - 0.5).collect();
        group.bench_with_input(BenchmarkId::from_parameter(size), &tape, |b, tape| {
            b.iter(|| backward(tape, black_box(&upstream)).unwrap())
        });
    }
    group.finish();
}

fn bench_motion_model(c: &mut Criterion) {
    let sketch = init_sketch(16, 0, 0.2, 0.001, 0.01).unwrap();
    let base = flatten_view(&sketch, OrthoPlane::Frontal);
    let model = MotionModel::new(16, 256, 0);
    c.bench_function("motion_model_forward", |b| {
        b.iter(|| model.forward(black_box(&base), 5, 16).unwrap())
    });
}

criterion_group!(benches, bench_render, bench_backward, bench_motion_model);
criterion_main!(benches);
