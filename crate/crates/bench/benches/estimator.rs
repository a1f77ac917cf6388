use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use tlspose::estimator::assemble;
use tlspose::generate::{gen_scenario, GenerationRecipe};
use tlspose::montecarlo::{run_trials, sample_measurements, trial_rng, TrialOptions};
use tlspose::sensitivity::{conditioning_sweep, Sensitivities};
use tlspose::uncertainty::UncertaintyReport;
use tlspose::{solve, SolverConfig};
use tlspose_bench::noisy_fixture;

fn solver(c: &mut Criterion) {
    let (sc, meas) = noisy_fixture(1);
    let config = SolverConfig::default();
    c.bench_function("solve/fixture", |b| b.iter(|| solve(black_box(&meas), sc.noise(), &config).unwrap()));
    c.bench_function("solve/fixture_zero_noise", |b| {
        let exact = sc.exact_measurements();
        b.iter(|| solve(black_box(&exact), sc.noise(), &config).unwrap())
    });
    let big = gen_scenario(&GenerationRecipe { n_features: 50, seed: 3, ..Default::default() }).unwrap();
    let big_meas = sample_measurements(&big, &mut trial_rng(3, 0)).unwrap();
    c.bench_function("solve/50_features", |b| b.iter(|| solve(black_box(&big_meas), big.noise(), &config).unwrap()));
}

fn linearization(c: &mut Criterion) {
    let (sc, meas) = noisy_fixture(1);
    let state = solve(&meas, sc.noise(), &SolverConfig::default()).unwrap().state;
    c.bench_function("assemble/fixture", |b| b.iter(|| assemble(black_box(&meas), sc.noise(), &state)));
    let sys = assemble(&meas, sc.noise(), &state);
    c.bench_function("uncertainty/fixture", |b| b.iter(|| UncertaintyReport::from_system(black_box(&sys)).unwrap()));
    c.bench_function("sensitivity/fixture", |b| b.iter(|| Sensitivities::new(black_box(&sys)).unwrap().all().unwrap()));
    c.bench_function("sweep/fixture", |b| b.iter(|| conditioning_sweep(black_box(&sc), &[1.0, 10.0, 100.0, 1000.0]).unwrap()));
}

fn montecarlo(c: &mut Criterion) {
    let (sc, _) = noisy_fixture(1);
    let mut group = c.benchmark_group("montecarlo");
    group.sample_size(10);
    group.bench_function("fixture_100_trials", |b| b.iter(|| run_trials(black_box(&sc), 100, 5, &TrialOptions::default()).unwrap()));
    group.finish();
}

criterion_group!(benches, solver, linearization, montecarlo);
criterion_main!(benches);
