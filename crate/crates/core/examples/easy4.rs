//! Trains on the `easy4` synthetic preset and prints multi-sequence accuracy.
//!
//! cargo run --release -p drivprof --example easy4 -- [seed]

use std::time::Instant;

use drivprof::eval::{multi_sequence_curve, ScoredWindows};
use drivprof::pipeline::{fit, FeatureTable, PipelineConfig};
use drivprof::synthdata::{generate_corpus, split_dataset, CorpusSpec};
use drivprof::training::TrainingConfig;

fn main() -> drivprof::Result<()> {
    let seed: u64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(0);
    let t0 = Instant::now();
    let corpus = generate_corpus(&CorpusSpec::easy4(seed))?;
    let (train, test) = split_dataset(&corpus, 0.8, seed)?;
    let cfg = PipelineConfig {
        window: 15.0,
        training: TrainingConfig {
            m: 2,
            q: 8,
            n_outer: 10,
            seed,
            ..TrainingConfig::default()
        },
        ..PipelineConfig::default()
    };
    let fitted = fit(&train, &cfg)?;
    for r in &fitted.output.trace.rows {
        println!("iter {:2} loss {:.4} acc {:.3} lr {:.4}", r.iter, r.loss, r.train_acc, r.lr);
    }
    let tab = FeatureTable::build(&test, &cfg.test_resample()?, &cfg.reaction_time)?;
    let scored = ScoredWindows::score(fitted.model(), &tab.windows)?;
    for r in multi_sequence_curve(&scored, &[1, 3, 5, 10], seed)? {
        println!("n={:2} accuracy {:.4} ({} trials)", r.n_sequences, r.accuracy, r.n_trials);
    }
    println!("{} train windows, {} test windows, {:.1?}", fitted.n_train_windows, tab.len(), t0.elapsed());
    Ok(())
}
