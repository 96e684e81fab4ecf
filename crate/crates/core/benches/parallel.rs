//! Sequential versus rayon-backed execution for the two data-parallel
//! paths: chunked evaluation of one network, and a sweep of independent
//! training runs.

use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use layerbin::data::{synthetic, Splits, SyntheticSpec};
use layerbin::nn::{Network, NetworkSpec, OptimizerKind};
use layerbin::par::{self, error_rate, Parallelism};
use layerbin::schedule::{run_iterative, BinarizationOrder, Regime, TrainPlan};

fn modes() -> Vec<(&'static str, Parallelism)> {
    let mut modes = vec![("sequential", Parallelism::Sequential)];
    if cfg!(feature = "parallel") {
        modes.push(("threads-2", Parallelism::Threads(2)));
        modes.push(("auto", Parallelism::Auto));
    }
    modes
}

fn eval_data() -> Splits {
    synthetic(&SyntheticSpec {
        sample_shape: vec![1, 28, 28],
        classes: 10,
        train: 16,
        val: 16,
        test: 4000,
        noise: 0.3,
        seed: 3,
    })
    .expect("synthetic data")
}

fn bench_eval(c: &mut Criterion) {
    let data = eval_data();
    let net = Network::<f32>::new(NetworkSpec::parse("300-100-10", &[1, 28, 28]).unwrap(), 1).unwrap();
    let mut group = c.benchmark_group("eval_4000");
    for (name, mode) in modes() {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| black_box(error_rate(mode, &net, &data.test).unwrap()))
        });
    }
    group.finish();
}

fn bench_sweep(c: &mut Criterion) {
    let data = synthetic(&SyntheticSpec { train: 400, val: 100, test: 100, ..SyntheticSpec::default() }).unwrap();
    let spec = NetworkSpec::parse("32-16-4", &[16]).unwrap();
    let seeds: Vec<u64> = (0..8).collect();
    let mut group = c.benchmark_group("sweep_8_seeds");
    group.sample_size(10);
    for (name, mode) in modes() {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| {
                par::map(mode, seeds.clone(), |seed| {
                    let plan = TrainPlan {
                        regime: Regime::Iterative { order: BinarizationOrder::forward(3), epochs_per_layer: 1 },
                        total_epochs: 3,
                        lr: 1e-3,
                        milestones: vec![],
                        optimizer: OptimizerKind::adam(),
                        batch_size: 20,
                        seed,
                    };
                    let net = Network::new(spec.clone(), seed).unwrap();
                    run_iterative(&plan, net, &data, Parallelism::Sequential).unwrap().best.val_error
                })
            })
        });
    }
    group.finish();
}

criterion_group!(benches, bench_eval, bench_sweep);
criterion_main!(benches);
