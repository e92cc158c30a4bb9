use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use nalgebra::DMatrix;

use flowfit_bench::misspec_fixture;
use flowfit_core::admm::{solve_beta, AdmmConfig, BetaProblem};
use flowfit_core::binning::bin_particles;
use flowfit_core::em::e_step;
use flowfit_core::{fit_em, BinGrid, BinMode, EmConfig, Hyperparams};

fn bench_e_step(c: &mut Criterion) {
    let (exp, truth) = misspec_fixture(1);
    c.bench_function("e_step/T100_N200_K3", |b| {
        b.iter(|| e_step(&truth, &exp.observed, &exp.cytograms).unwrap())
    });
}

fn bench_beta(c: &mut Criterion) {
    let (exp, truth) = misspec_fixture(2);
    let gamma = e_step(&truth, &exp.observed, &exp.cytograms).unwrap();
    let weights = gamma.cluster_weights(&exp.cytograms, 1);
    let total = exp.cytograms.total_weight();
    let sigma = DMatrix::identity(1, 1) * 0.36;
    let mut group = c.benchmark_group("solve_beta");
    for lambda in [1e-3, 1e-1] {
        let problem =
            BetaProblem::new(1, &exp.observed, &exp.cytograms, &weights, &sigma, total, lambda, 1.0).unwrap();
        group.bench_function(format!("lambda={lambda}"), |b| {
            b.iter(|| solve_beta(&problem, &AdmmConfig::default(), None).unwrap())
        });
    }
    group.finish();
}

fn bench_fit(c: &mut Criterion) {
    let (exp, _) = misspec_fixture(3);
    let grid = BinGrid::covering(&exp.cytograms, 40).unwrap();
    let binned = bin_particles(&exp.cytograms, &grid, BinMode::Counts)
        .unwrap()
        .to_cytograms()
        .unwrap();
    let hyper = Hyperparams::new(0.01, 0.01, 1.0).unwrap();
    let config = EmConfig {
        restarts: 1,
        rel_tol: 1e-5,
        ..EmConfig::default()
    };
    let mut group = c.benchmark_group("fit_em");
    group.sample_size(10);
    group.bench_function("binned_D40_K3", |b| {
        b.iter_batched(
            || config,
            |cfg| fit_em(&exp.observed, &binned, 3, &hyper, &cfg).unwrap(),
            BatchSize::SmallInput,
        )
    });
    group.finish();
}

criterion_group!(benches, bench_e_step, bench_beta, bench_fit);
criterion_main!(benches);
