//! Compares the data-parallel map against its forced-sequential twin on
//! the two workloads that dominate wall time: per-example evaluation
//! passes and loss-landscape grid cells. Run with and without the
//! `parallel` feature to see the seam from both sides.

use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use tiqat::parallel;

/// Stand-in for one eval-pass unit of work: a few small matmul-like
/// reductions, enough arithmetic to dwarf scheduling overhead.
fn workload(i: usize) -> f64 {
    let n = 64;
    let mut acc = 0.0f64;
    let mut x = (i as f64 + 1.0) * 0.001;
    for _ in 0..n * n {
        x = x * 1.000001 + 0.5;
        acc += (x.sin() * x.cos()).abs().sqrt();
    }
    acc
}

fn bench_maps(c: &mut Criterion) {
    let mut group = c.benchmark_group("map_eval_batch");
    for n in [8usize, 64] {
        group.bench_function(format!("parallel_n{n}"), |b| {
            b.iter_batched(
                || n,
                |n| parallel::map_range(n, workload),
                BatchSize::SmallInput,
            )
        });
        group.bench_function(format!("sequential_n{n}"), |b| {
            b.iter_batched(
                || n,
                |n| parallel::map_range_seq(n, workload),
                BatchSize::SmallInput,
            )
        });
    }
    group.finish();
}

criterion_group!(benches, bench_maps);
criterion_main!(benches);
