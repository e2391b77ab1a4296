use criterion::{criterion_group, criterion_main, Criterion};
fn bench_probe(c: &mut Criterion) {
    c.bench_function("probe", |b| b.iter(wavekit_core::probe));
}
criterion_group!(benches, bench_probe);
criterion_main!(benches);
