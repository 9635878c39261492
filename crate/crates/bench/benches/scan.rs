use std::path::PathBuf;

use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion, Throughput};
use trodo_bench::{desk_model, ood_batch, source_images};
use trodo_core::attack::{pgd_increase_id_score_batch, AttackConfig};
use trodo_core::calibration::{calibrate, CalibrationOptions};
use trodo_core::scanner::{scan_with_sources, ScanConfig, ScanMode};
use trodo_core::Objective;

fn forward_backward(c: &mut Criterion) {
    let model = desk_model(1);
    let net = model.network();
    let mut group = c.benchmark_group("network");
    for n in [1usize, 32, 128] {
        let xs = ood_batch(n, 2).flat();
        let objs = vec![Objective::IdScore; n];
        group.throughput(Throughput::Elements(n as u64));
        group.bench_with_input(BenchmarkId::new("forward", n), &n, |b, &n| {
            b.iter(|| net.logits_batch(black_box(&xs), n).unwrap())
        });
        group.bench_with_input(BenchmarkId::new("input_gradient", n), &n, |b, &n| {
            b.iter(|| net.input_gradients(black_box(&xs), n, &objs).unwrap())
        });
    }
    group.finish();
}

fn pgd(c: &mut Criterion) {
    let model = desk_model(3);
    let xs = ood_batch(64, 4).flat();
    let attack = AttackConfig::id_score(0.5);
    let mut group = c.benchmark_group("pgd");
    group.throughput(Throughput::Elements(64));
    group.sample_size(20);
    group.bench_function("id_score_l2_10_steps_64", |b| {
        b.iter(|| pgd_increase_id_score_batch(&model, black_box(&xs), 64, &attack).unwrap())
    });
    group.finish();
}

fn scan(c: &mut Criterion) {
    let surrogate = desk_model(5);
    let sources = source_images(20, 6);
    let opts = CalibrationOptions {
        n_baseline: 4,
        samples_per_baseline: 64,
        fixed_epsilon: Some(0.2),
        ..CalibrationOptions::default()
    };
    let cal = calibrate(&surrogate, &sources, &opts).unwrap();
    let model = desk_model(7);
    let mut cfg = ScanConfig::new(ScanMode::Trodo { benign_samples_path: PathBuf::new() }, cal, 8);
    let mut group = c.benchmark_group("scan");
    group.sample_size(10);
    for batch in [64usize, 256] {
        cfg.batch_size = batch;
        group.bench_with_input(BenchmarkId::new("one_model", batch), &batch, |b, _| {
            b.iter(|| scan_with_sources(&model, &cfg, &sources).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, forward_backward, pgd, scan);
criterion_main!(benches);
