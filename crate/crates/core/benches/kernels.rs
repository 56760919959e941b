//! Sequential vs rayon execution of the hot kernels.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use dlglc::clusterlab::{assign_points, kmeans_with, KmeansConfig};
use dlglc::numkit::kernels::matmul_nt;
use dlglc::numkit::{Exec, Rng, Tape, Tensor};
use std::hint::black_box;

const MODES: [(&str, Exec); 2] = [("sequential", Exec::Sequential), ("parallel", Exec::Parallel)];

fn matmul(c: &mut Criterion) {
    let mut g = c.benchmark_group("matmul_nt");
    let mut rng = Rng::new(0);
    for n in [64, 256, 1024] {
        let (k, m) = (128, 128);
        let a = rng.normal_vec(n * k, 1.0);
        let b = rng.normal_vec(m * k, 1.0);
        for (name, exec) in MODES {
            g.bench_with_input(BenchmarkId::new(name, n), &n, |bch, &n| bch.iter(|| matmul_nt(black_box(&a), n, k, black_box(&b), m, exec)));
        }
    }
    g.finish();
}

fn points(n: usize, d: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = Rng::new(seed);
    (0..n).map(|_| rng.normal_vec(d, 1.0)).collect()
}

fn kmeans(c: &mut Criterion) {
    let pts = points(1000, 32, 1);
    let centroids = points(30, 32, 2);
    let mut g = c.benchmark_group("kmeans");
    for (name, exec) in MODES {
        g.bench_function(BenchmarkId::new("assign", name), |b| b.iter(|| assign_points(black_box(&pts), black_box(&centroids), exec)));
        let cfg = KmeansConfig { max_iters: 20, restarts: 1 };
        g.bench_function(BenchmarkId::new("fit_k30", name), |b| b.iter(|| kmeans_with(black_box(&pts), 30, &mut Rng::new(3), &cfg, exec).unwrap()));
    }
    g.finish();
}

fn tape_forward_backward(c: &mut Criterion) {
    let mut rng = Rng::new(4);
    let x = Tensor::matrix(192, 32, rng.normal_vec(192 * 32, 1.0));
    let w = Tensor::matrix(128, 32, rng.normal_vec(128 * 32, 0.2));
    let mut g = c.benchmark_group("tape_linear_relu");
    for (name, exec) in MODES {
        g.bench_function(name, |b| {
            b.iter(|| {
                let mut tape = Tape::with_exec(exec);
                let xv = tape.constant(&x);
                let wv = tape.param(&w);
                let h = tape.matmul_nt(xv, wv);
                let h = tape.relu(h);
                let s = tape.sum(h);
                tape.backward(s)
            })
        });
    }
    g.finish();
}

criterion_group!(benches, matmul, kmeans, tape_forward_backward);
criterion_main!(benches);
