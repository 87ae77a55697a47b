use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use causal_trace::oracle::{build_oracle, gen_dataset, trace_samples, OracleSpec};
use causal_trace::par::available_workers;
use causal_trace::sweep::{all_sites, layer_sweep, token_sweep, SweepOptions};
use causal_trace::CorruptionSpec;

fn bench_sweeps(c: &mut Criterion) {
    let spec = OracleSpec {
        n_layers: 6,
        copy_block: 3,
        ..OracleSpec::default()
    };
    let model = build_oracle(&spec).unwrap();
    let samples = trace_samples(&spec, &gen_dataset(&spec, 64, true).unwrap());
    let corruption = CorruptionSpec::zeros(spec.n_attributes);
    let sites = all_sites(&model);

    let mut workers = vec![1];
    if available_workers() > 1 {
        workers.push(available_workers());
    }

    let mut group = c.benchmark_group("sweeps");
    group.sample_size(10);
    for &w in &workers {
        let opts = SweepOptions {
            workers: w,
            ..SweepOptions::default()
        };
        group.bench_with_input(BenchmarkId::new("layers", w), &opts, |b, opts| {
            b.iter(|| layer_sweep(&model, &samples, &corruption, &sites, opts).unwrap())
        });
        group.bench_with_input(BenchmarkId::new("tokens", w), &opts, |b, opts| {
            b.iter(|| token_sweep(&model, &samples, &corruption, &sites, opts).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, bench_sweeps);
criterion_main!(benches);
