use std::hint::black_box;
use std::sync::Arc;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use mscada_bench::bench_config;
use mscada_core::hgcn::{hypergraph_conv, Hypergraph};
use mscada_core::train::Trainer;
use mscada_core::{Graph, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

fn matmul(c: &mut Criterion) {
    let mut group = c.benchmark_group("matmul");
    for n in [64, 256] {
        let (a, b) = (random(&[n, n], 1), random(&[n, n], 2));
        group.bench_with_input(BenchmarkId::from_parameter(n), &n, |bench, _| {
            bench.iter(|| {
                let mut g = Graph::new();
                let (av, bv) = (g.constant(a.clone()), g.constant(b.clone()));
                black_box(g.matmul(av, bv).unwrap());
            })
        });
    }
    group.finish();
}

fn conv2d(c: &mut Criterion) {
    let x = random(&[4, 12, 32, 32], 3);
    let w = random(&[12, 12, 3, 3], 4);
    c.bench_function("conv2d_forward_backward", |bench| {
        bench.iter(|| {
            let mut g = Graph::new();
            let xv = g.leaf(x.clone(), true);
            let wv = g.leaf(w.clone(), true);
            let y = g.conv2d(xv, wv).unwrap();
            let s = g.sum(y);
            black_box(g.backward(s).unwrap());
        })
    });
}

fn knn(c: &mut Criterion) {
    let x = random(&[256, 36], 5);
    c.bench_function("knn_256x36_k64", |bench| {
        bench.iter(|| black_box(Hypergraph::knn(&x, 64).unwrap()))
    });
}

fn hgconv(c: &mut Criterion) {
    let x = random(&[1, 256, 36], 6);
    let theta = random(&[36, 24], 7);
    let graph = Arc::new(Hypergraph::knn(&x.clone().reshape(&[256, 36]).unwrap(), 64).unwrap());
    c.bench_function("hypergraph_conv_forward_backward", |bench| {
        bench.iter(|| {
            let mut g = Graph::new();
            let xv = g.leaf(x.clone(), true);
            let tv = g.leaf(theta.clone(), true);
            let y = hypergraph_conv(&mut g, std::slice::from_ref(&graph), xv, tv).unwrap();
            let s = g.sum(y);
            black_box(g.backward(s).unwrap());
        })
    });
}

fn train_step(c: &mut Criterion) {
    let cfg = bench_config();
    let data = cfg.load_data().unwrap();
    let mut trainer = Trainer::new(cfg, data).unwrap();
    let mut group = c.benchmark_group("train_step");
    group.sample_size(20);
    group.bench_function("equality2_32x32_b2", |bench| bench.iter(|| black_box(trainer.train_step().unwrap())));
    group.finish();
}

criterion_group!(benches, matmul, conv2d, knn, hgconv, train_step);
criterion_main!(benches);
