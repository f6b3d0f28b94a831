use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use peros_bench::happydog_inputs;
use peros_core::compile;
use peros_core::fixture::HAPPYDOG_REQUEST;
use peros_core::interpreter::rule_parse;
use peros_core::storage::trace::{random_fixture, sequential_fixture};
use peros_core::storage::{random_mapping, simulate, LearnedIndex, SimConfig};

fn index(c: &mut Criterion) {
    let table = random_mapping(100_000, 42);
    let idx = LearnedIndex::build(table.clone(), 16).unwrap();
    let keys: Vec<u64> = table.iter().step_by(97).map(|(k, _)| *k).collect();
    c.bench_function("index/build_100k", |b| {
        b.iter_batched(|| table.clone(), |t| LearnedIndex::build(t, 16).unwrap(), BatchSize::LargeInput)
    });
    c.bench_function("index/lookup", |b| {
        b.iter(|| {
            for k in &keys {
                black_box(idx.lookup(*k).unwrap());
            }
        })
    });
}

fn readahead(c: &mut Criterion) {
    let seq = sequential_fixture();
    let random = random_fixture();
    let cfg = SimConfig::default();
    c.bench_function("sim/sequential", |b| b.iter(|| simulate(black_box(&seq), &cfg).unwrap()));
    c.bench_function("sim/random", |b| b.iter(|| simulate(black_box(&random), &cfg).unwrap()));
}

fn planning(c: &mut Criterion) {
    let (lex, reg, frame) = happydog_inputs();
    c.bench_function("interpret/rule_parse", |b| {
        b.iter(|| rule_parse(black_box(HAPPYDOG_REQUEST), &lex.grammar).unwrap())
    });
    c.bench_function("director/compile", |b| b.iter(|| compile(black_box(&frame), &lex, &reg, "bench").unwrap()));
}

criterion_group!(benches, index, readahead, planning);
criterion_main!(benches);
