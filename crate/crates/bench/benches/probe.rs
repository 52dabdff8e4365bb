use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion, Throughput};
use lookback_bench::{probe_records, scores, token_stream, trace};
use lookback_core::probe::{aggregate_delta_curves, step_perplexities, GroupBy};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn perplexities(c: &mut Criterion) {
    let len = 2_000;
    let t = trace(0, &token_stream(len, 4), true);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (r, n, a) = (
        scores(len, &mut rng),
        scores(len, &mut rng),
        scores(len, &mut rng),
    );
    let mut group = c.benchmark_group("step_perplexities");
    group.throughput(Throughput::Elements(len as u64));
    group.bench_function("2k_steps", |b| {
        b.iter(|| step_perplexities(&t, &r, &n, &a).expect("aligned"))
    });
    group.finish();
}

fn aggregation(c: &mut Criterion) {
    let mut group = c.benchmark_group("aggregate_delta_curves");
    for traces in [10usize, 100] {
        let records = probe_records(traces, 500, 5);
        group.throughput(Throughput::Elements(records.len() as u64));
        group.bench_with_input(
            BenchmarkId::from_parameter(records.len()),
            &records,
            |b, records| {
                b.iter(|| aggregate_delta_curves(records, GroupBy::BOTH, 50).expect("non-empty"))
            },
        );
    }
    group.finish();
}

criterion_group!(benches, perplexities, aggregation);
criterion_main!(benches);
