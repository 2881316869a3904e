use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use std::hint::black_box;

use volex_core::expansion::{ExpansionCoeffs, OuNoise};
use volex_core::hjb::{solve_w_lambda, PdeGrid};
use volex_core::montecarlo::simulate_adaptive;
use volex_core::{MarketParams, TimeFunction, TimeGrid, VolumeModel};

fn ou_model() -> VolumeModel {
    VolumeModel::perturbed_ou(TimeFunction::constant(100.0), 0.5, 2.0, 0.3).unwrap()
}

fn pde_solve(c: &mut Criterion) {
    let model = ou_model();
    let mut group = c.benchmark_group("pde_solve");
    group.sample_size(10);
    for (n_t, n_y) in [(500, 101), (2000, 401)] {
        let grid = PdeGrid::new(1.0, n_t, n_y).unwrap().with_save_every(n_t);
        group.bench_with_input(BenchmarkId::from_parameter(format!("{n_t}x{n_y}")), &grid, |b, grid| {
            b.iter(|| solve_w_lambda(black_box(&model), 100.0, grid).unwrap())
        });
    }
    group.finish();
}

fn adaptive_path(c: &mut Criterion) {
    let params = MarketParams::reference();
    let grid = TimeGrid::new(1.0, 500).unwrap();
    let model = ou_model();
    let table = ExpansionCoeffs::new(TimeFunction::constant(100.0), 1.0, 0.5)
        .unwrap()
        .ou_table(&OuNoise::new(2.0, 0.3).unwrap(), &grid)
        .unwrap();
    let path = model.sample_path(&grid, 1);
    c.bench_function("adaptive_path_500", |b| {
        b.iter(|| simulate_adaptive(&params, &table, black_box(&path), 0.02).unwrap())
    });
    c.bench_function("sample_ou_path_500", |b| {
        let mut i = 0;
        b.iter(|| {
            i += 1;
            model.sample_path_stream(&grid, 1, black_box(i))
        })
    });
}

fn expansion_table(c: &mut Criterion) {
    let grid = TimeGrid::new(1.0, 500).unwrap();
    let noise = OuNoise::new(2.0, 0.3).unwrap();
    let coeffs = ExpansionCoeffs::new(TimeFunction::constant(100.0), 1.0, 0.5).unwrap();
    let mut group = c.benchmark_group("expansion_table");
    group.sample_size(20);
    group.bench_function("ou_closed_form_500", |b| {
        b.iter(|| coeffs.ou_table(black_box(&noise), &grid).unwrap())
    });
    group.bench_function("i2_pointwise", |b| {
        b.iter(|| coeffs.i2_ou(&noise, black_box(0.3), black_box(0.2)).unwrap())
    });
    group.finish();
}

criterion_group!(benches, pde_solve, adaptive_path, expansion_table);
criterion_main!(benches);
