use criterion::{criterion_group, criterion_main, Criterion};
use neurocache::{Model, ModelConfig, QueryCounter};
use neurocache_bench::random_tokens;

fn segment(c: &mut Criterion) {
    let config = ModelConfig::toy();
    let model = Model::new(config.clone()).unwrap();
    let n = config.segment_len;
    let inputs = random_tokens(n, config.vocab_size, 5);
    let targets: Vec<Option<u32>> = random_tokens(n, config.vocab_size, 6).into_iter().map(Some).collect();
    let counter = QueryCounter::default();

    c.bench_function("forward_segment/toy/full cache", |b| {
        let mut cache = model.new_cache().unwrap();
        for _ in 0..config.cache_size / n {
            model.forward_segment(&inputs, &targets, Some(&mut cache), &counter).unwrap();
        }
        b.iter(|| model.forward_segment(&inputs, &targets, Some(&mut cache), &counter).unwrap())
    });
    c.bench_function("forward_segment/toy/no cache", |b| {
        b.iter(|| model.forward_segment(&inputs, &targets, None, &counter).unwrap())
    });
}

criterion_group!(benches, segment);
criterion_main!(benches);
