use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion, Throughput};
use pimflow::{reference_execute, WorkloadKind};
use pimflow_bench::{options, simulate, workload};

const N: u64 = 100_000;

fn simulated(c: &mut Criterion) {
    let mut g = c.benchmark_group("simulated");
    g.sample_size(10).throughput(Throughput::Elements(N));
    for kind in WorkloadKind::ALL {
        let w = workload(kind, N);
        for dpus in [64, 2560] {
            g.bench_with_input(BenchmarkId::new(kind.name(), dpus), &dpus, |b, &d| b.iter(|| simulate(&w, &options(d))));
        }
    }
    g.finish();
}

fn reference(c: &mut Criterion) {
    let mut g = c.benchmark_group("reference");
    g.sample_size(10).throughput(Throughput::Elements(N));
    for kind in WorkloadKind::ALL {
        let w = workload(kind, N);
        g.bench_function(kind.name(), |b| b.iter(|| reference_execute(&w.pipeline, &w.inputs, &w.env).unwrap()));
    }
    g.finish();
}

criterion_group!(benches, simulated, reference);
criterion_main!(benches);
