use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use std::hint::black_box;

use tradeflow_bench::{agents, ensemble, oscillators, series};
use tradeflow_core::aggregate::aggregate;
use tradeflow_core::dynamics::integrate_coupled;
use tradeflow_core::ensemble::run_ensemble;
use tradeflow_core::espace::{EconomicDomain, Grid, GridSpec};
use tradeflow_core::fieldsolve::{step_continuity, stable_dt};
use tradeflow_core::pricing::decompose_series;
use tradeflow_core::{closed_form_disturbance, TimeWindow};

fn bench_aggregate(c: &mut Criterion) {
    let bounds = [1.0, 2.0, 3.0];
    let grid = Grid::new(
        EconomicDomain::new(bounds.to_vec()).unwrap(),
        &GridSpec { cells_per_axis: vec![10, 10, 10] },
    )
    .unwrap();
    let snapshots = vec![agents(10_000, &bounds, 2, 3)];
    let window = TimeWindow::single(0.1);
    c.bench_function("aggregate 10k agents 3d", |b| {
        b.iter(|| aggregate(black_box(&snapshots), &grid, &window, 2, 0.0).unwrap())
    });
}

fn bench_field(c: &mut Criterion) {
    let grid = Grid::line(1.0, 1000).unwrap();
    let velocity: Vec<[f64; 3]> = (0..1000).map(|i| [(i as f64 * 0.01).sin(), 0.0, 0.0]).collect();
    let f: Vec<f64> = (0..1000).map(|i| 1.0 + (i as f64 * 0.03).cos()).collect();
    let source = vec![0.0; 1000];
    let dt = stable_dt(&grid, &velocity);
    c.bench_function("continuity step 1000 cells", |b| {
        b.iter(|| step_continuity(&grid, black_box(&f), &velocity, &source, dt).unwrap())
    });
}

fn bench_dynamics(c: &mut Criterion) {
    let params = oscillators(4);
    let s0 = closed_form_disturbance(&params, 0.0).unwrap();
    c.bench_function("rk4 4 types 1000 steps", |b| {
        b.iter(|| integrate_coupled(&params, black_box(&s0), 0.005, 1000).unwrap())
    });
}

fn bench_decompose(c: &mut Criterion) {
    let (s, w) = series(&oscillators(4), 0.05, 400);
    c.bench_function("decompose 400 samples 2 horizons", |b| {
        b.iter(|| decompose_series(black_box(&s), &w, &[1, 20], None))
    });
}

fn bench_ensemble(c: &mut Criterion) {
    let mut group = c.benchmark_group("ensemble");
    group.sample_size(10);
    group.bench_function("200 runs", |b| {
        b.iter_batched(|| ensemble(200), |cfg| run_ensemble(&cfg).unwrap(), BatchSize::SmallInput)
    });
    group.finish();
}

criterion_group!(benches, bench_aggregate, bench_field, bench_dynamics, bench_decompose, bench_ensemble);
criterion_main!(benches);
