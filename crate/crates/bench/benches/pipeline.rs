use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use otmetric::elliptic::{solve, DivFormOperator, SolverConfig};
use otmetric::grid::GridSpec;
use otmetric::ot::{sinkhorn, DiscreteMeasure, SinkhornConfig, WrappedSqDistance};
use otmetric::probes::make_dipole_source;
use otmetric::reconstruction::reconstruct;
use otmetric_bench::{measured, scenario};

fn operator(c: &mut Criterion) {
    let mut group = c.benchmark_group("operator");
    for n in [64, 128, 256] {
        let cfg = scenario(n);
        let truth = otmetric::scenario::Truth::synthesize(&cfg).unwrap();
        let op = DivFormOperator::assemble(&truth.g, &truth.h).unwrap();
        let u: Vec<f64> = (0..cfg.grid.len())
            .map(|k| (k as f64 * 0.37).sin())
            .collect();
        let mut out = vec![0.0; u.len()];
        group.bench_with_input(BenchmarkId::new("apply", n), &n, |b, _| {
            b.iter(|| op.apply(black_box(&u), &mut out))
        });
        let src = make_dipole_source(&truth.g, &truth.h, "b", [2.8, 3.1], [3.4, 3.1], 0.3)
            .unwrap()
            .field;
        group.bench_with_input(BenchmarkId::new("solve", n), &n, |b, _| {
            b.iter(|| solve(&op, &src, &truth.h, &truth.g, &SolverConfig::default()))
        });
    }
    group.finish();
}

fn reconstruction(c: &mut Criterion) {
    let mut group = c.benchmark_group("reconstruction");
    group.sample_size(10);
    let (cfg, _, ms) = measured(64);
    let cover = cfg.patch_cover().unwrap();
    group.bench_function("reconstruct/64", |b| {
        b.iter(|| reconstruct(&ms, &cover, &cfg.recon).unwrap())
    });
    group.finish();
}

fn transport(c: &mut Criterion) {
    let mut group = c.benchmark_group("transport");
    group.sample_size(10);
    for n in [16, 32] {
        let grid = GridSpec::torus(n).unwrap();
        let cost = WrappedSqDistance::new(grid, 1.0).unwrap();
        let mu = DiscreteMeasure::uniform(grid);
        let w: Vec<f64> = (0..grid.len())
            .map(|k| 1.0 + 0.3 * (k as f64 * 0.11).sin())
            .collect();
        let total: f64 = w.iter().sum();
        let nu = DiscreteMeasure::new(grid, w.into_iter().map(|v| v / total).collect()).unwrap();
        let cfg = SinkhornConfig {
            reg: 0.05,
            ..SinkhornConfig::default()
        };
        group.bench_with_input(BenchmarkId::new("sinkhorn", n), &n, |b, _| {
            b.iter(|| sinkhorn(&mu, &nu, &cost, &cfg).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, operator, reconstruction, transport);
criterion_main!(benches);
