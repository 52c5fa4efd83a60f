use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use imoc_diffmath::{Conv2dSpec, Graph, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f32> {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

fn conv_step(x: &Tensor<f32>, k: &Tensor<f32>) -> f32 {
    let g = Graph::new();
    let xv = g.constant(x.clone());
    let kv = g.param(k.clone());
    let y = g.conv2d(xv, kv, Conv2dSpec::new(1, 1)).unwrap();
    let y = g.relu(y);
    let s = g.sum_all(y);
    let grads = g.backward(s).unwrap();
    grads.grad(kv).data()[0]
}

fn pools() -> Vec<(usize, rayon::ThreadPool)> {
    let n = std::thread::available_parallelism().map_or(1, |n| n.get());
    let mut sizes = vec![1];
    if n > 1 {
        sizes.push(n);
    }
    sizes
        .into_iter()
        .map(|t| {
            let pool = rayon::ThreadPoolBuilder::new().num_threads(t).build().unwrap();
            (t, pool)
        })
        .collect()
}

fn bench_conv(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let x = random(&[64, 32, 16, 16], &mut rng);
    let k = random(&[64, 32, 3, 3], &mut rng);
    let mut group = c.benchmark_group("conv2d_fwd_bwd");
    group.sample_size(10);
    for (threads, pool) in pools() {
        group.bench_with_input(BenchmarkId::from_parameter(threads), &threads, |b, _| {
            pool.install(|| b.iter(|| black_box(conv_step(&x, &k))))
        });
    }
    group.finish();
}

fn bench_matmul(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let a = random(&[128, 512], &mut rng);
    let w = random(&[512, 256], &mut rng);
    c.bench_function("matmul_fwd_bwd_128x512x256", |b| {
        b.iter(|| {
            let g = Graph::new();
            let av = g.constant(a.clone());
            let wv = g.param(w.clone());
            let y = g.matmul(av, wv).unwrap();
            let s = g.sum_all(y);
            black_box(g.backward(s).unwrap().grad(wv).data()[0])
        })
    });
}

criterion_group!(benches, bench_conv, bench_matmul);
criterion_main!(benches);
