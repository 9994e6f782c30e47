//! Hot paths under the rayon pool and on a single thread.
//!
//! `cargo bench -p drivprof` compares the global rayon pool against a
//! one-thread pool;
//! `cargo bench -p drivprof --no-default-features` runs the sequential build.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use drivprof::domain::Dataset;
use drivprof::eval::{evaluate, ScoredWindows};
use drivprof::features::{extract_all, ProjectionModel, Standardizer};
use drivprof::model::{em_fit, EmInit};
use drivprof::pipeline::{fit, FeatureTable, PipelineConfig};
use drivprof::synthdata::{generate_corpus, CorpusSpec};
use drivprof::training::{loss_and_gradient, MixtureParams, TrainingConfig};

struct Fixture {
    corpus: Dataset,
    table: FeatureTable,
    cfg: PipelineConfig,
}

fn fixture() -> Fixture {
    let mut spec = CorpusSpec::hard8(0);
    spec.sequences_per_driver = 30;
    let corpus = generate_corpus(&spec).unwrap();
    let cfg = PipelineConfig {
        training: TrainingConfig {
            m: 4,
            q: 16,
            n_outer: 3,
            n_final_em: 20,
            ..TrainingConfig::default()
        },
        ..PipelineConfig::default()
    };
    let table = FeatureTable::build(&corpus, &cfg.train_resample().unwrap(), &cfg.reaction_time).unwrap();
    Fixture { corpus, table, cfg }
}

#[cfg(feature = "parallel")]
fn modes() -> Vec<(String, Option<rayon::ThreadPool>)> {
    let one = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
    vec![
        ("rayon".into(), None),
        ("single_thread".into(), Some(one)),
    ]
}

#[cfg(not(feature = "parallel"))]
fn modes() -> Vec<(String, Option<()>)> {
    vec![("sequential".into(), None)]
}

#[cfg(feature = "parallel")]
fn run<T: Send>(pool: &Option<rayon::ThreadPool>, f: impl FnOnce() -> T + Send) -> T {
    match pool {
        Some(p) => p.install(f),
        None => f(),
    }
}

#[cfg(not(feature = "parallel"))]
fn run<T>(_: &Option<()>, f: impl FnOnce() -> T) -> T {
    f()
}

fn benches(c: &mut Criterion) {
    let fx = fixture();
    let std = Standardizer::fit(&fx.table.raw).unwrap();
    let set = fx.table.training_set(&std, &fx.corpus.driver_ids()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let a = ProjectionModel::random_orthonormal(4, &mut rng).unwrap();
    let points = set.project(&a).unwrap();
    let em = em_fit(&points, 16, EmInit::Random, 10, &mut rng).unwrap();
    let params = MixtureParams {
        states: em.states,
        profiles: em.profiles,
    };
    let model = fit(&fx.corpus, &fx.cfg).unwrap().output.model;

    for (name, pool) in modes() {
        let mut g = c.benchmark_group("pipeline");
        g.sample_size(10);
        g.bench_with_input(BenchmarkId::new("features", &name), &(), |b, _| {
            b.iter(|| run(&pool, || extract_all(&fx.table.windows, &fx.cfg.reaction_time).unwrap()))
        });
        g.bench_with_input(BenchmarkId::new("em_10_iter", &name), &(), |b, _| {
            b.iter(|| {
                run(&pool, || {
                    let mut rng = ChaCha8Rng::seed_from_u64(1);
                    em_fit(&points, 16, EmInit::Random, 10, &mut rng).unwrap()
                })
            })
        });
        g.bench_with_input(BenchmarkId::new("loss_gradient", &name), &(), |b, _| {
            b.iter(|| run(&pool, || loss_and_gradient(&set, &a, &params).unwrap()))
        });
        g.bench_with_input(BenchmarkId::new("evaluate_n5", &name), &(), |b, _| {
            b.iter(|| run(&pool, || evaluate(&model, &fx.table.windows, 5, 0).unwrap()))
        });
        g.bench_with_input(BenchmarkId::new("score_windows", &name), &(), |b, _| {
            b.iter(|| run(&pool, || ScoredWindows::score(&model, &fx.table.windows).unwrap()))
        });
        g.finish();
    }
}

criterion_group!(pipeline, benches);
criterion_main!(pipeline);
