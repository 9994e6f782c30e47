use drivprof::domain::Dataset;
use drivprof::eval::{evaluate, sweep, SweepGrid};
use drivprof::io::{model_from_json, model_to_json};
use drivprof::model::infer_multi;
use drivprof::pipeline::{fit, FeatureTable, PipelineConfig};
use drivprof::synthdata::{generate_corpus, split_dataset, CorpusSpec};
use drivprof::training::TrainingConfig;

fn small_easy4(per_driver: usize, seed: u64) -> (Dataset, Dataset) {
    let mut spec = CorpusSpec::easy4(seed);
    spec.sequences_per_driver = per_driver;
    split_dataset(&generate_corpus(&spec).unwrap(), 0.8, seed).unwrap()
}

fn small_cfg(seed: u64) -> PipelineConfig {
    PipelineConfig {
        training: TrainingConfig {
            m: 2,
            q: 5,
            n_outer: 4,
            n_final_em: 30,
            seed,
            ..TrainingConfig::default()
        },
        ..PipelineConfig::default()
    }
}

#[test]
fn zero_learning_rate_freezes_projection() {
    let (train, _) = small_easy4(10, 1);
    let mut cfg = small_cfg(1);
    cfg.training.lr = 0.0;
    let out = fit(&train, &cfg).unwrap().output;
    let first = &out.trace.projections[0];
    assert!(out.trace.projections.iter().all(|a| a == first));
    assert_eq!(&out.model.projection().to_row_major(), first);
    assert!(out.trace.rows.iter().all(|r| r.lr == 0.0));
}

#[test]
fn model_json_round_trips_bit_exactly() {
    let (train, test) = small_easy4(10, 2);
    let cfg = small_cfg(2);
    let fitted = fit(&train, &cfg).unwrap();
    let text = model_to_json(fitted.model()).unwrap();
    let back = model_from_json(&text).unwrap();
    assert_eq!(model_to_json(&back).unwrap(), text);
    assert_eq!(back.states(), fitted.model().states());

    let tab = FeatureTable::build(&test, &cfg.test_resample().unwrap(), &cfg.reaction_time).unwrap();
    let a = infer_multi(&tab.windows, fitted.model()).unwrap();
    let b = infer_multi(&tab.windows, &back).unwrap();
    assert_eq!(a.log_scores, b.log_scores);
}

#[cfg(feature = "parallel")]
#[test]
fn results_do_not_depend_on_thread_count() {
    let (train, test) = small_easy4(12, 3);
    let cfg = small_cfg(3);
    let run = |threads: usize| {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        pool.install(|| {
            let fitted = fit(&train, &cfg).unwrap();
            let tab = FeatureTable::build(&test, &cfg.test_resample().unwrap(), &cfg.reaction_time).unwrap();
            let report = evaluate(fitted.model(), &tab.windows, 2, 3).unwrap();
            (model_to_json(fitted.model()).unwrap(), fitted.output.trace.to_csv(), report)
        })
    };
    assert_eq!(run(1), run(4));
}

#[test]
fn one_cell_sweep_equals_direct_run() {
    let (train, test) = small_easy4(10, 4);
    let cfg = small_cfg(4);
    let grid = SweepGrid {
        repetitions: 1,
        base_seed: 4,
        ..SweepGrid::default()
    };
    let res = sweep(&grid, &train, &test, &cfg).unwrap();
    assert_eq!(res.cells.len(), 1);

    let fitted = fit(&train, &cfg).unwrap();
    let tab = FeatureTable::build(&test, &cfg.test_resample().unwrap(), &cfg.reaction_time).unwrap();
    let direct = evaluate(fitted.model(), &tab.windows, 1, 0).unwrap();
    assert_eq!(res.cells[0].test_acc, vec![direct.accuracy]);
}

#[test]
fn two_by_two_sweep_bookkeeping() {
    let (train, test) = small_easy4(8, 5);
    let grid = SweepGrid {
        q: vec![3, 5],
        m: vec![1, 2],
        repetitions: 2,
        base_seed: 10,
        ..SweepGrid::default()
    };
    let a = sweep(&grid, &train, &test, &small_cfg(0)).unwrap();
    assert_eq!(a.cells.len(), 4);
    assert_eq!(a.seeds, vec![10, 11]);
    for c in &a.cells {
        assert_eq!(c.train_acc.len() + c.failures.len(), 2);
    }
    let runs: usize = a.cells.iter().map(|c| c.test_acc.len() + c.failures.len()).sum();
    assert_eq!(runs, 4 * 2);
    let b = sweep(&grid, &train, &test, &small_cfg(0)).unwrap();
    assert_eq!(a, b);
    let csv = a.qm_heatmap_csv(true).unwrap();
    assert!(csv.starts_with("Q\\M,1,2\n3,"));
}

/// Directional check: identity-capacity projections (M = 8) trail the best
/// reduced projection on hard8 test accuracy.
#[test]
fn hard8_full_dimension_underperforms() {
    let corpus = generate_corpus(&CorpusSpec::hard8(0)).unwrap();
    let (train, test) = split_dataset(&corpus, 0.8, 0).unwrap();
    let base = PipelineConfig {
        training: TrainingConfig {
            q: 16,
            n_outer: 6,
            n_final_em: 100,
            ..TrainingConfig::default()
        },
        ..PipelineConfig::default()
    };
    let grid = SweepGrid {
        m: vec![2, 4, 8],
        repetitions: 2,
        base_seed: 0,
        ..SweepGrid::default()
    };
    let res = sweep(&grid, &train, &test, &base).unwrap();
    let acc = |m: usize| res.cells.iter().find(|c| c.m == m).and_then(|c| c.mean_test()).unwrap();
    let best_reduced = acc(2).max(acc(4));
    println!("hard8 test accuracy: M=2 {:.4}, M=4 {:.4}, M=8 {:.4}", acc(2), acc(4), acc(8));
    assert!(acc(8) < best_reduced);
}
