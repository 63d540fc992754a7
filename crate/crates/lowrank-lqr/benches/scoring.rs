//! Candidate scoring throughput: parallel map vs the sequential baseline.
//! The scoring step dominates each learning episode (one Riccati solve per
//! candidate), so this is the kernel the `parallel` feature targets.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use lowrank_lqr::control::{CostSpec, NoiseModel};
use lowrank_lqr::env::make_lowrank_system;
use lowrank_lqr::learner::{score_candidates, score_candidates_seq};

fn candidates(d: usize, d_u: usize, n: usize, seed: u64) -> Vec<DMatrix<f64>> {
    let cost = CostSpec::identity(d, d_u, 10).unwrap();
    let sys = make_lowrank_system(d, d_u, 3.min(d), 0.9, 1.0, &cost, seed).unwrap();
    let base = sys.dynamics.concat();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let e = DMatrix::from_fn(d, d + d_u, |_, _| rng.gen::<f64>() - 0.5);
            &base + e * 0.01
        })
        .collect()
}

fn bench_scoring(c: &mut Criterion) {
    let mut group = c.benchmark_group("score_candidates");
    for &(d, d_u, n) in &[(10usize, 3usize, 50usize), (30, 3, 50)] {
        let cands = candidates(d, d_u, n, 7);
        let cost = CostSpec::identity(d, d_u, 10).unwrap();
        let noise = NoiseModel::new(0.05, d).unwrap();
        let x1 = DVector::from_element(d, 1.0 / (d as f64).sqrt());
        group.bench_with_input(
            BenchmarkId::new("parallel", format!("d{}_n{}", d, n)),
            &cands,
            |b, cands| b.iter(|| score_candidates(cands, d_u, &cost, &noise, &x1)),
        );
        group.bench_with_input(
            BenchmarkId::new("sequential", format!("d{}_n{}", d, n)),
            &cands,
            |b, cands| b.iter(|| score_candidates_seq(cands, d_u, &cost, &noise, &x1)),
        );
    }
    group.finish();
}

criterion_group!(benches, bench_scoring);
criterion_main!(benches);
