//! Throughput of the pipeline's hot paths: signal synthesis, gradient
//! steps, phantom generation, voxel prediction and interval scoring.

use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion, Throughput};
use ivimuq_bench::{standard_network, standard_schedule, training_batch, untrained_ensemble};
use ivimuq_core::metrics::crps_from_sorted;
use ivimuq_core::ndarray::{Array2, ArrayView2};
use ivimuq_core::nn::loss_and_gradient;
use ivimuq_core::{
    forward_signal, generate_phantom, predict_voxel, rng_from_seed, HeadSpec, IvimParams,
    PriorRanges,
};
use rand::Rng;

fn bench_forward_signal(c: &mut Criterion) {
    let schedule = standard_schedule();
    let params = IvimParams::new(0.0012, 0.15, 0.05);
    let mut group = c.benchmark_group("forward_signal");
    group.throughput(Throughput::Elements(schedule.values().len() as u64));
    group.bench_function("14_point_protocol", |b| {
        b.iter(|| forward_signal(black_box(params), &schedule, black_box(1.0)).unwrap())
    });
    group.finish();
}

fn bench_gradient_step(c: &mut Criterion) {
    let (x, y) = training_batch(128, 11);
    let mut group = c.benchmark_group("gradient_step");
    group.throughput(Throughput::Elements(x.nrows() as u64));
    for spec in [HeadSpec::point(), HeadSpec::gaussian(), HeadSpec::mdn(10)] {
        let net = standard_network(&spec, 7);
        let loss =
            |raw: &Array2<f64>, labels: &ArrayView2<f64>| spec.loss_and_grad(raw, labels);
        group.bench_function(BenchmarkId::from_parameter(spec.kind.name()), |b| {
            b.iter(|| {
                loss_and_gradient(&net, &loss, &black_box(x.view()), &black_box(y.view()))
                    .unwrap()
            })
        });
    }
    group.finish();
}

fn bench_phantom(c: &mut Criterion) {
    let schedule = standard_schedule();
    let ranges = PriorRanges::default();
    let mut group = c.benchmark_group("phantom");
    group.sample_size(20);
    group.bench_function("76x76_snr50", |b| {
        let mut seed = 0u64;
        b.iter(|| {
            seed += 1;
            generate_phantom(76, 76, 50.0, &ranges, &schedule, black_box(seed)).unwrap()
        })
    });
    group.finish();
}

fn bench_predict_voxel(c: &mut Criterion) {
    let ens = untrained_ensemble(HeadSpec::mdn(10), 5);
    let mut rng = rng_from_seed(21);
    let signal: Vec<f64> = (0..14).map(|_| rng.gen_range(0.2..1.0)).collect();
    let mut group = c.benchmark_group("predict_voxel");
    group.bench_function("mdn_k10_m5_100_samples", |b| {
        b.iter(|| predict_voxel(&ens, black_box(&signal), 100, false, &mut rng).unwrap())
    });
    group.finish();
}

fn bench_crps(c: &mut Criterion) {
    let mut rng = rng_from_seed(5);
    let mut samples: Vec<f64> = (0..500).map(|_| rng.gen_range(0.0..1.0)).collect();
    samples.sort_unstable_by(f64::total_cmp);
    let mut group = c.benchmark_group("crps");
    group.throughput(Throughput::Elements(samples.len() as u64));
    group.bench_function("500_sorted_samples", |b| {
        b.iter(|| crps_from_sorted(black_box(&samples), black_box(0.4)).unwrap())
    });
    group.finish();
}

criterion_group!(
    benches,
    bench_forward_signal,
    bench_gradient_step,
    bench_phantom,
    bench_predict_voxel,
    bench_crps
);
criterion_main!(benches);
