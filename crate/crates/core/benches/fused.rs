use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use fused_ce::gen::{rng, InstanceSpec};
use fused_ce::kernel::default_workers;
use fused_ce::{
    fused_backward_recompute, fused_forward, reference_forward, ExecConfig, MemoryLedger,
    Reduction, UpstreamGradient,
};

fn worker_counts() -> Vec<usize> {
    let mut counts = vec![1];
    let all = default_workers();
    if all > 1 {
        counts.push(all);
    }
    counts
}

fn forward(c: &mut Criterion) {
    let (n, d, v) = (512, 128, 4096);
    let inst = InstanceSpec::benchmark(n, d, v).generate::<f32>(&mut rng(7));
    let mut group = c.benchmark_group("forward");
    group.sample_size(10);
    for workers in worker_counts() {
        let exec = ExecConfig::with_workers(workers);
        group.bench_with_input(BenchmarkId::new("fused", workers), &exec, |b, exec| {
            b.iter(|| {
                fused_forward(&inst.hidden, &inst.weight, &inst.targets, Reduction::Mean, exec, &MemoryLedger::new())
                    .unwrap()
            })
        });
    }
    group.bench_function("canonical", |b| {
        b.iter(|| {
            reference_forward(
                black_box(&inst.hidden),
                &inst.weight,
                &inst.targets,
                Reduction::Mean,
                &MemoryLedger::new(),
            )
            .unwrap()
        })
    });
    group.finish();
}

fn forward_backward(c: &mut Criterion) {
    let (n, d, v) = (256, 128, 4096);
    let inst = InstanceSpec::benchmark(n, d, v).generate::<f32>(&mut rng(8));
    let mut group = c.benchmark_group("forward_backward");
    group.sample_size(10);
    for workers in worker_counts() {
        let exec = ExecConfig::with_workers(workers);
        group.bench_with_input(BenchmarkId::new("fused", workers), &exec, |b, exec| {
            b.iter(|| {
                let ledger = MemoryLedger::new();
                let out = fused_forward(&inst.hidden, &inst.weight, &inst.targets, Reduction::Mean, exec, &ledger)
                    .unwrap();
                fused_backward_recompute(
                    &inst.hidden,
                    &inst.weight,
                    &inst.targets,
                    &out.stats,
                    &UpstreamGradient::Scalar(1.0),
                    Reduction::Mean,
                    exec,
                    &ledger,
                )
                .unwrap()
            })
        });
    }
    group.finish();
}

criterion_group!(benches, forward, forward_backward);
criterion_main!(benches);
