use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use mlvamp::denoise::linear::denoise_linear;
use mlvamp::denoise::scalar::{denoise_middle, ScalarChannel};
use mlvamp::engine::{EngineOptions, MlVamp};
use mlvamp::se::{error_nonlinear, SeOptions};
use mlvamp::{build_synthetic_network, sample_trajectory, Stage, SyntheticConfig};
use nalgebra::DVector;

fn denoisers(c: &mut Criterion) {
    let relu = ScalarChannel::relu();
    c.bench_function("denoise_middle_relu", |b| {
        b.iter(|| denoise_middle(relu, black_box(0.3), black_box(-0.1), 2.0, 5.0).unwrap())
    });

    let net = build_synthetic_network(&SyntheticConfig::default()).unwrap();
    let Stage::Linear(stage) = &net.stages()[2] else { unreachable!() };
    let r_plus = DVector::from_fn(stage.n_in(), |i, _| (i as f64).sin());
    let r_minus = DVector::from_fn(stage.n_out(), |i, _| (i as f64).cos());
    c.bench_function("denoise_linear_100x500", |b| {
        b.iter(|| denoise_linear(stage, black_box(&r_plus), black_box(&r_minus), 3.0, 4.0).unwrap())
    });
}

fn engine(c: &mut Criterion) {
    let net = build_synthetic_network(&SyntheticConfig::default()).unwrap();
    let traj = sample_trajectory(&net, 1);
    c.bench_function("mlvamp_iteration", |b| {
        b.iter_batched(
            || MlVamp::new(&net, traj.observation(), EngineOptions::default()).unwrap(),
            |mut e| {
                e.forward_pass(None).unwrap();
                e.backward_pass(None).unwrap();
                e
            },
            criterion::BatchSize::LargeInput,
        )
    });
}

fn state_evolution(c: &mut Criterion) {
    let opts = SeOptions::default();
    c.bench_function("se_error_nonlinear_relu", |b| {
        b.iter(|| error_nonlinear(ScalarChannel::relu(), black_box(2.0), 5.0, 1.5, 0.2, &opts).unwrap())
    });
}

criterion_group!(benches, denoisers, engine, state_evolution);
criterion_main!(benches);
