use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use ullsnn_core::analysis::{compute_h, Bootstrap, EmpiricalDistribution};
use ullsnn_core::arch::mlp;
use ullsnn_core::convert::{convert_dnn_to_snn, ConversionMode};
use ullsnn_core::data::Synthetic;
use ullsnn_core::dnn::{collect_activation_stats, train_dnn, StatsConfig, TrainConfig};
use ullsnn_core::snn::evaluate_snn;
use ullsnn_core::Execution;

const STRATEGIES: [(&str, Execution); 2] = [("sequential", Execution::Sequential), ("parallel", Execution::Parallel)];

fn blobs() -> ullsnn_core::data::Dataset {
    Synthetic::Blobs { classes: 4, dim: 16, samples_per_class: 64, separation: 3.0, spread: 1.0 }
        .generate(7)
        .unwrap()
}

fn snn_inference(c: &mut Criterion) {
    let data = blobs();
    let net = mlp(16, &[128, 128], 4, None, 1).unwrap();
    let stats = collect_activation_stats(&net, &data, &StatsConfig::default()).unwrap();
    let (snn, _) = convert_dnn_to_snn(&net, &stats, 4, ConversionMode::Scaled).unwrap();
    let mut g = c.benchmark_group("evaluate_snn");
    g.sample_size(20);
    for (name, exec) in STRATEGIES {
        g.bench_with_input(BenchmarkId::from_parameter(name), &exec, |b, &exec| {
            b.iter(|| evaluate_snn(&snn, &data, 4, exec).unwrap())
        });
    }
    g.finish();
}

fn bootstrap(c: &mut Criterion) {
    let dist = EmpiricalDistribution::uniform(1.0, 100_000, 3).unwrap();
    let mut g = c.benchmark_group("bootstrap_h");
    g.sample_size(10);
    for (name, execution) in STRATEGIES {
        let cfg = Bootstrap { resamples: 100, seed: 1, execution };
        g.bench_with_input(BenchmarkId::from_parameter(name), &cfg, |b, cfg| {
            b.iter(|| compute_h(&dist, 4, 1.0, false, cfg).unwrap())
        });
    }
    g.finish();
}

fn dnn_epoch(c: &mut Criterion) {
    let data = blobs();
    let net = mlp(16, &[128, 128], 4, None, 1).unwrap();
    let mut g = c.benchmark_group("train_dnn_epoch");
    g.sample_size(10);
    for (name, execution) in STRATEGIES {
        let cfg = TrainConfig { epochs: 1, batch_size: 64, execution, ..TrainConfig::default() };
        g.bench_with_input(BenchmarkId::from_parameter(name), &cfg, |b, cfg| {
            b.iter(|| train_dnn(&net, &data, cfg).unwrap())
        });
    }
    g.finish();
}

criterion_group!(benches, snn_inference, bootstrap, dnn_epoch);
criterion_main!(benches);
