// SPDX-License-Identifier: MIT
use criterion::{criterion_group, criterion_main, Criterion};
use gnies::graphs::{
    dag_to_icpdag, enumerate_class, gnies_completion, meek_closure, pdag_to_dag, Pdag,
};
use gnies_bench::protocol_instance;
use std::hint::black_box;

fn setup() -> (Pdag, gnies::graphs::TargetSet) {
    let (_, truth) = protocol_instance(10, 5, 10, 11);
    let dag = truth.model.graph().unwrap();
    (dag_to_icpdag(&dag, &truth.targets), truth.targets)
}

fn bench_graph_ops(c: &mut Criterion) {
    let (icpdag, targets) = setup();
    c.bench_function("meek_closure_p10", |b| {
        b.iter(|| meek_closure(black_box(&icpdag)))
    });
    c.bench_function("pdag_to_dag_p10", |b| {
        b.iter(|| pdag_to_dag(black_box(&icpdag)).unwrap())
    });
    c.bench_function("gnies_completion_p10", |b| {
        b.iter(|| gnies_completion(black_box(&icpdag), black_box(&targets)).unwrap())
    });
    c.bench_function("enumerate_class_p10", |b| {
        b.iter(|| enumerate_class(black_box(&icpdag), black_box(&targets)).unwrap())
    });
}

criterion_group!(benches, bench_graph_ops);
criterion_main!(benches);
