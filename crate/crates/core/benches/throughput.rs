//! Benchmarks the data-parallel hot paths against a single-thread pool, so
//! `cargo bench` shows the rayon speedup directly. Building with
//! `--no-default-features` benches the plain sequential fallback.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use atd_core::domain::{GridSpec, ObservationSet};
use atd_core::permanent::{GmmPrior, ScoreModel};
use atd_core::policy::{score_candidates, PolicyConfig};
use atd_core::posterior::sample_posterior;
use atd_core::reward::RewardModel;
use atd_core::schedule::NoiseSchedule;
use atd_core::transient::HModel;

fn build_model(h: usize, w: usize) -> ScoreModel {
    let schedule = NoiseSchedule::linear(30, 1e-4, 0.2, 0.0).unwrap();
    ScoreModel::analytic(GmmPrior::canonical_blobs(h, w), schedule)
}

fn bench_posterior(c: &mut Criterion) {
    let model = build_model(32, 32);
    let grid = GridSpec::new(32, 32, 1, 1).unwrap();
    let obs = ObservationSet::empty(&grid);
    let h = HModel::new(32, 32, &[32, 64], 32, 1);
    let mut group = c.benchmark_group("posterior_ensemble");
    group.sample_size(10);
    group.bench_function(BenchmarkId::new("pool", "default"), |b| {
        b.iter(|| sample_posterior(&model, Some(&h), &obs, 16, 7).unwrap())
    });
    #[cfg(feature = "parallel")]
    {
        let single = rayon::ThreadPoolBuilder::new()
            .num_threads(1)
            .build()
            .unwrap();
        group.bench_function(BenchmarkId::new("pool", "single-thread"), |b| {
            b.iter(|| single.install(|| sample_posterior(&model, Some(&h), &obs, 16, 7).unwrap()))
        });
    }
    group.finish();
}

fn bench_scoring(c: &mut Criterion) {
    let model = build_model(32, 32);
    let grid = GridSpec::new(32, 32, 1, 1).unwrap();
    let obs = ObservationSet::empty(&grid);
    let ens = sample_posterior(&model, None, &obs, 16, 3).unwrap();
    let reward = RewardModel::new(1, 1, 5);
    let cfg = PolicyConfig::default();
    let mut group = c.benchmark_group("candidate_scoring");
    group.sample_size(20);
    group.bench_function(BenchmarkId::new("pool", "default"), |b| {
        b.iter(|| score_candidates(&ens, &grid, &reward, &cfg, 10, 250).unwrap())
    });
    #[cfg(feature = "parallel")]
    {
        let single = rayon::ThreadPoolBuilder::new()
            .num_threads(1)
            .build()
            .unwrap();
        group.bench_function(BenchmarkId::new("pool", "single-thread"), |b| {
            b.iter(|| {
                single.install(|| score_candidates(&ens, &grid, &reward, &cfg, 10, 250).unwrap())
            })
        });
    }
    group.finish();
}

criterion_group!(benches, bench_posterior, bench_scoring);
criterion_main!(benches);
