use criterion::{black_box, criterion_group, criterion_main, Criterion};
use microsim_core::config::default_sandybridge;
use microsim_core::engine::simulate;
use microsim_core::memhier::{AccessOp, MemHierarchy};
use microsim_core::predictor::{tage_new, tage_predict, tage_update, TageConfig};
use microsim_core::trace::{gen_fuzz_traces, gen_ops, GenParams, MicroOp, TracePattern, TraceStream};
use microsim_core::util::SplitMix64;

fn streams(threads: &[Vec<MicroOp>]) -> Vec<TraceStream> {
    threads
        .iter()
        .enumerate()
        .map(|(t, ops)| TraceStream::from_ops(ops.clone(), t))
        .collect()
}

fn bench_single_core(c: &mut Criterion) {
    let cfg = default_sandybridge();
    let alu = gen_ops(TracePattern::AluIndep, 2000, &GenParams::default()).unwrap();
    let mixed = gen_fuzz_traces(7, 2000, 1);

    let mut group = c.benchmark_group("single_core");
    group.bench_function("alu_indep_2k", |b| {
        b.iter(|| simulate(&cfg, streams(&alu)).unwrap().total_cycles)
    });
    group.bench_function("mixed_fuzz_2k", |b| {
        b.iter(|| simulate(&cfg, streams(&mixed)).unwrap().total_cycles)
    });
    group.finish();
}

fn bench_multicore_coherence(c: &mut Criterion) {
    let cfg = default_sandybridge();
    let pingpong = gen_ops(TracePattern::MesiPingpong, 500, &GenParams::default()).unwrap();
    let quad = gen_fuzz_traces(11, 1000, 4);

    let mut group = c.benchmark_group("multicore");
    group.bench_function("mesi_pingpong_500x2", |b| {
        b.iter(|| simulate(&cfg, streams(&pingpong)).unwrap().bus.messages)
    });
    group.bench_function("fuzz_1k_x4", |b| {
        b.iter(|| simulate(&cfg, streams(&quad)).unwrap().total_cycles)
    });
    group.finish();
}

fn bench_predictor(c: &mut Criterion) {
    c.bench_function("tage_predict_update_10k", |b| {
        b.iter(|| {
            let mut state = tage_new(&TageConfig::default()).unwrap();
            let mut rng = SplitMix64::new(3);
            let mut correct = 0u64;
            for i in 0..10_000u64 {
                let pc = 0x40_0000 + (i % 64) * 4;
                let outcome = rng.chance(3, 4);
                let p = tage_predict(&state, black_box(pc));
                correct += (p.taken == outcome) as u64;
                tage_update(&mut state, pc, outcome, &p);
            }
            correct
        })
    });
}

fn bench_cache_walks(c: &mut Criterion) {
    let cfg = default_sandybridge();
    c.bench_function("cache_hits_10k", |b| {
        b.iter(|| {
            let mut hier = MemHierarchy::new(&cfg, 1).unwrap();
            let mut total = 0u64;
            for i in 0..10_000u64 {
                total += hier
                    .access(0, 0x1_0000 + (i % 32) * 64, AccessOp::Read, i)
                    .latency;
            }
            total
        })
    });
}

criterion_group!(
    benches,
    bench_single_core,
    bench_multicore_coherence,
    bench_predictor,
    bench_cache_walks
);
criterion_main!(benches);
