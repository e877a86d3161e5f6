use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use splatbridge::raster::{render_reference, render_with, RenderOptions};
use splatbridge_bench::{camera, scene};

fn tiled_vs_reference(c: &mut Criterion) {
    let cam = camera(128);
    let mut group = c.benchmark_group("render_128");
    for n in [100, 1000] {
        let s = scene(n, 1);
        group.bench_with_input(BenchmarkId::new("tiled_1_worker", n), &s, |b, s| {
            b.iter(|| render_with(s, &cam, [0.0; 3], &RenderOptions { workers: 1 }))
        });
        group.bench_with_input(BenchmarkId::new("tiled_pool", n), &s, |b, s| {
            b.iter(|| render_with(s, &cam, [0.0; 3], &RenderOptions::default()))
        });
        group.bench_with_input(BenchmarkId::new("reference", n), &s, |b, s| b.iter(|| render_reference(s, &cam, [0.0; 3])));
    }
    group.finish();
}

criterion_group!(benches, tiled_vs_reference);
criterion_main!(benches);
