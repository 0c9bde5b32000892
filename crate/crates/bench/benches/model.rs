use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use mscrack_bench::toy_model;
use mscrack_core::params::zeros_like;

fn segmenter(c: &mut Criterion) {
    let mut g = c.benchmark_group("toy_segmenter_48");
    for channels in [3usize, 6] {
        let (model, image) = toy_model(channels, 48, 0);
        g.bench_function(format!("forward_{channels}ch"), |b| {
            b.iter(|| model.forward(black_box(&image)).unwrap())
        });
        g.bench_function(format!("forward_backward_{channels}ch"), |b| {
            b.iter(|| {
                let (logits, cache) = model.forward_cached(black_box(&image)).unwrap();
                let mut grads = zeros_like(&model);
                model.backward(&cache, &logits, &mut grads).unwrap()
            })
        });
    }
    g.finish();
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(10);
    targets = segmenter
}
criterion_main!(benches);
