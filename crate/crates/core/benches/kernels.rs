//! Sequential vs parallel execution of the data-parallel kernels.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use flowlab::eval::{mmd_rbf_with, sliced_wasserstein_with};
use flowlab::exec::{gemm, gemm_naive, Exec, MatRef};
use flowlab::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::hint::black_box;

fn randn(rows: usize, cols: usize, seed: u64) -> Tensor {
    Tensor::randn(vec![rows, cols], &mut ChaCha8Rng::seed_from_u64(seed))
}

fn label(exec: Exec) -> &'static str {
    match exec {
        Exec::Sequential => "sequential",
        #[allow(unreachable_patterns)]
        _ => "parallel",
    }
}

fn bench_gemm(c: &mut Criterion) {
    let mut group = c.benchmark_group("gemm");
    for &n in &[64usize, 256] {
        let a = randn(n, n, 1);
        let b = randn(n, n, 2);
        for exec in Exec::available() {
            group.bench_with_input(BenchmarkId::new(label(exec), n), &n, |bench, &n| {
                bench.iter(|| gemm(exec, MatRef::new(a.data(), n, n), MatRef::new(b.data(), n, n)))
            });
        }
        if n <= 64 {
            group.bench_with_input(BenchmarkId::new("naive", n), &n, |bench, &n| {
                bench.iter(|| gemm_naive(MatRef::new(a.data(), n, n), MatRef::new(b.data(), n, n)))
            });
        }
    }
    group.finish();
}

fn bench_metrics(c: &mut Criterion) {
    let a = randn(2000, 2, 3);
    let b = randn(2000, 2, 4);
    let mut sw = c.benchmark_group("sliced_wasserstein");
    for exec in Exec::available() {
        sw.bench_function(label(exec), |bench| {
            bench.iter(|| sliced_wasserstein_with(exec, black_box(&a), black_box(&b), 128, 0).unwrap())
        });
    }
    sw.finish();

    let a = randn(500, 2, 5);
    let b = randn(500, 2, 6);
    let mut mmd = c.benchmark_group("mmd_rbf");
    for exec in Exec::available() {
        mmd.bench_function(label(exec), |bench| {
            bench.iter(|| mmd_rbf_with(exec, black_box(&a), black_box(&b), 0.5).unwrap())
        });
    }
    mmd.finish();
}

criterion_group!(benches, bench_gemm, bench_metrics);
criterion_main!(benches);
