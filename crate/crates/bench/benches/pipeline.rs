use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use habmap_bench::{blobs, cube, mask_for, plots};
use habmap_core::ensemble::combine;
use habmap_core::learners::{ForestParams, GbtParams, MlpParams};
use habmap_core::mapassembly::{apply_masks, top_k};
use habmap_core::{build_partition, train, Family, ModelSpec, PartitionParams};

fn learners(c: &mut Criterion) {
    let data = blobs(1000, 6, 1);
    let mut g = c.benchmark_group("train_1000x6");
    g.sample_size(10);
    g.bench_function("forest_32_trees", |b| {
        let spec = ModelSpec::Bagging(ForestParams {
            n_trees: 32,
            ..Default::default()
        });
        b.iter(|| train(black_box(&spec), &data, None, 1).unwrap())
    });
    g.bench_function("gbt_64_iters", |b| {
        let spec = ModelSpec::Boosting(GbtParams {
            max_iters: 64,
            early_stopping_rounds: None,
            ..Default::default()
        });
        b.iter(|| train(black_box(&spec), &data, None, 1).unwrap())
    });
    g.bench_function("mlp_128_10_epochs", |b| {
        let spec = ModelSpec::Neural(MlpParams {
            max_epochs: 10,
            early_stopping_rounds: None,
            ..Default::default()
        });
        b.iter(|| train(black_box(&spec), &data, None, 1).unwrap())
    });
    g.finish();
}

fn partition(c: &mut Criterion) {
    let (coords, labels) = plots(10_000, 20, 1_500_000.0);
    let params = PartitionParams::default();
    c.bench_function("partition_10k_plots", |b| {
        b.iter(|| build_partition(black_box(&coords), &labels, 20, &params).unwrap())
    });
}

fn assembly(c: &mut Criterion) {
    let prob = cube(256, 9);
    let mask = mask_for(&prob);
    c.bench_function("apply_masks_256x256x9", |b| {
        b.iter(|| apply_masks(black_box(&prob), &mask).unwrap())
    });
    c.bench_function("top3_256x256x9", |b| b.iter(|| top_k(black_box(&prob), 3)));

    let members: Vec<Vec<f64>> = (0..15).map(|m| prob.pixel(m * 97).unwrap()).collect();
    let weights: Vec<f64> = (1..=15).map(f64::from).collect();
    let groups: Vec<(Family, usize)> = (0..15).map(|m| (Family::ALL[m % 3], m / 3)).collect();
    c.bench_function("combine_15_members", |b| {
        b.iter(|| combine(black_box(&weights), &members, &groups).unwrap())
    });
}

criterion_group!(benches, learners, partition, assembly);
criterion_main!(benches);
