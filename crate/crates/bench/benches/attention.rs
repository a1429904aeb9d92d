use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion, Throughput};
use signtok_bench::{encoder, input};
use signtok_core::nncore::Graph;

const DIM: usize = 64;

fn forward_backward(c: &mut Criterion) {
    let (params, enc) = encoder(1);
    let mut group = c.benchmark_group("encoder_forward_backward");
    for len in [32, 64, 128, 256] {
        let x = input(len, DIM);
        group.throughput(Throughput::Elements(len as u64));
        group.bench_with_input(BenchmarkId::from_parameter(len), &len, |b, &len| {
            b.iter(|| {
                let mut g = Graph::train(&params, None);
                let xv = g.input(x.clone());
                let h = enc.forward(&mut g, xv, &[len]).unwrap();
                let loss = g.mean(h);
                black_box(g.backward(loss).unwrap());
            })
        });
    }
    group.finish();
}

/// Same 300-frame video at the token counts of segment tokens (≈0.13 per
/// frame) and 4× uniform downsampling (0.25 per frame).
fn tokens_per_video(c: &mut Criterion) {
    let (params, enc) = encoder(1);
    let frames: usize = 300;
    let mut group = c.benchmark_group("encoder_tokens_per_300_frames");
    for (name, len) in [("segment", frames * 13 / 100), ("uniform4", frames.div_ceil(4))] {
        let x = input(len, DIM);
        group.bench_function(name, |b| {
            b.iter(|| {
                let mut g = Graph::eval(&params);
                let xv = g.input(x.clone());
                black_box(enc.forward(&mut g, xv, &[len]).unwrap());
            })
        });
    }
    group.finish();
}

criterion_group!(benches, forward_backward, tokens_per_video);
criterion_main!(benches);
