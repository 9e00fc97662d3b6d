//! Rayon path vs. sequential fallback on the two hottest data-parallel
//! loops: sample synthesis and constant refinement. On a single core the
//! two should match within noise.

use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};

use factorforge::infer::{refine_constants, InferenceConfig};
use factorforge::par;
use factorforge::synth::{sample_at, GeneratorConfig};

fn synthesis(c: &mut Criterion) {
    let cfg = GeneratorConfig { w_max: 4, m_max: 100, ..Default::default() };
    let mut g = c.benchmark_group("synthesize_64");
    g.sample_size(10);
    g.bench_function(BenchmarkId::new("rayon", par::threads()), |b| {
        b.iter(|| par::map_range(64, |i| sample_at(&cfg, black_box(1), i as u64).map(|s| s.bag.len())))
    });
    g.bench_function("sequential", |b| {
        b.iter(|| par::map_range_seq(64, |i| sample_at(&cfg, black_box(1), i as u64).map(|s| s.bag.len())))
    });
    g.finish();
}

fn refinement(c: &mut Criterion) {
    let cfg = GeneratorConfig { w_max: 3, m_max: 200, u_max: 1, ..Default::default() };
    let samples: Vec<_> = (0..32).filter_map(|i| sample_at(&cfg, 2, i).ok()).collect();
    let inf = InferenceConfig { bfgs_max_iter: 50, ..Default::default() };
    let mut g = c.benchmark_group("refine_32");
    g.sample_size(10);
    g.bench_function(BenchmarkId::new("rayon", par::threads()), |b| {
        b.iter(|| par::map(&samples, |s| refine_constants(&s.expr, &s.bag, &inf).error_after))
    });
    g.bench_function("sequential", |b| {
        b.iter(|| par::map_seq(&samples, |s| refine_constants(&s.expr, &s.bag, &inf).error_after))
    });
    g.finish();
}

criterion_group!(benches, synthesis, refinement);
criterion_main!(benches);
