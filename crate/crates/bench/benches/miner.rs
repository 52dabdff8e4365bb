use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion, Throughput};
use lookback_bench::flagged_corpus;
use lookback_core::miner::{
    mine_lookback_templates, mine_pause_phrases, FlaggedTrace, MiningParams,
};

fn counting(c: &mut Criterion) {
    let params = MiningParams::default();
    let mut group = c.benchmark_group("miner");
    group.sample_size(20);
    for traces in [20usize, 100] {
        let (ts, flags) = flagged_corpus(traces, 500, 3);
        let fts: Vec<FlaggedTrace> = ts
            .iter()
            .zip(&flags)
            .map(|(t, f)| FlaggedTrace::new(t, f).expect("aligned"))
            .collect();
        group.throughput(Throughput::Elements((traces * 500) as u64));
        group.bench_with_input(
            BenchmarkId::new("pause_phrases", traces * 500),
            &fts,
            |b, fts| b.iter(|| mine_pause_phrases(fts, &params).expect("mined")),
        );
        group.bench_with_input(
            BenchmarkId::new("templates", traces * 500),
            &fts,
            |b, fts| b.iter(|| mine_lookback_templates(fts, &params).expect("mined")),
        );
    }
    group.finish();
}

criterion_group!(benches, counting);
criterion_main!(benches);
