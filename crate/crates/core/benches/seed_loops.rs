//! Sequential vs data-parallel seed loops on the two hot paths: training
//! seed-aligned pairs and the local forgetting bound.

use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use weightscrub::data::{gen_clusters, make_split, ClusterSpec, SplitRule};
use weightscrub::infobound::{local_bound, train_pairs};
use weightscrub::models::ModelSpec;
use weightscrub::parallel::Parallelism;
use weightscrub::scrub::{NoiseExponent, ScrubConfig};
use weightscrub::training::{Init, TrainConfig};

fn seed_loops(c: &mut Criterion) {
    let data = gen_clusters(
        &[
            ClusterSpec {
                mean: vec![-2.0, 0.0],
                stddev: 0.7,
                count: 60,
                label: 0,
            },
            ClusterSpec {
                mean: vec![2.0, 0.0],
                stddev: 0.7,
                count: 60,
                label: 1,
            },
            ClusterSpec {
                mean: vec![0.0, 2.5],
                stddev: 0.7,
                count: 60,
                label: 2,
            },
        ],
        0,
    )
    .unwrap();
    let split = make_split(&data, SplitRule::CountFromClass { class: 2, count: 20 }).unwrap();
    let spec = ModelSpec::mlp(2, vec![8], 3, 0.01).unwrap();
    let train = TrainConfig {
        seed: 0,
        learning_rate: 0.1,
        batch_size: 10,
        epochs: 10,
        init: Init::Uniform { scale: 0.5 },
        early_stop_epochs: None,
    };
    let scrub = ScrubConfig::Fisher {
        lambda: 1e-6,
        sigma_h: 1.0,
        exponent: NoiseExponent::FourthRoot,
        floor: 1e-8,
    };
    let seeds: Vec<u64> = (0..32).collect();

    let modes = [("sequential", Parallelism::Sequential), ("parallel", Parallelism::Auto)];
    let mut group = c.benchmark_group("train_pairs");
    group.sample_size(10);
    for (name, par) in modes {
        group.bench_with_input(BenchmarkId::from_parameter(name), &par, |b, &par| {
            b.iter(|| black_box(train_pairs(&spec, &split, &train, &seeds, par).unwrap()))
        });
    }
    group.finish();

    let mut group = c.benchmark_group("local_bound");
    group.sample_size(10);
    for (name, par) in modes {
        group.bench_with_input(BenchmarkId::from_parameter(name), &par, |b, &par| {
            b.iter(|| black_box(local_bound(&spec, &split, &train, &scrub, &seeds, par).unwrap()))
        });
    }
    group.finish();
}

criterion_group!(benches, seed_loops);
criterion_main!(benches);
