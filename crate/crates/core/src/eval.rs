//! Accuracy, confusion matrices, multi-sequence trials and sweeps.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::domain::{CarFollowingSequence, Dataset};
use crate::model::{argmax, combine_log_posteriors, GenerativeModel};
use crate::pipeline::{fit, FeatureTable, PipelineConfig};
use crate::{par, Error, Result};

/// Counts indexed `[truth][predicted]` over a shared label list.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub labels: Vec<String>,
    pub counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn new(labels: Vec<String>) -> Self {
        let k = labels.len();
        ConfusionMatrix {
            labels,
            counts: vec![vec![0; k]; k],
        }
    }

    pub fn row_sums(&self) -> Vec<u64> {
        self.counts.iter().map(|r| r.iter().sum()).collect()
    }

    pub fn total(&self) -> u64 {
        self.row_sums().iter().sum()
    }

    pub fn correct(&self) -> u64 {
        (0..self.labels.len()).map(|i| self.counts[i][i]).sum()
    }

    /// Diagonal over row sum; `None` for rows without samples.
    pub fn recall(&self) -> Vec<Option<f64>> {
        self.counts
            .iter()
            .enumerate()
            .map(|(i, r)| {
                let s: u64 = r.iter().sum();
                (s > 0).then(|| r[i] as f64 / s as f64)
            })
            .collect()
    }

    pub fn accuracy(&self) -> f64 {
        let t = self.total();
        if t == 0 {
            0.0
        } else {
            self.correct() as f64 / t as f64
        }
    }

    /// `truth\pred,<labels...>,recall`
    pub fn to_csv(&self) -> String {
        let mut s = String::from("truth\\pred");
        for l in &self.labels {
            let _ = write!(s, ",{l}");
        }
        s.push_str(",recall\n");
        for ((l, row), rec) in self.labels.iter().zip(&self.counts).zip(self.recall()) {
            let _ = write!(s, "{l}");
            for c in row {
                let _ = write!(s, ",{c}");
            }
            match rec {
                Some(r) => {
                    let _ = writeln!(s, ",{r}");
                }
                None => s.push_str(",\n"),
            }
        }
        s
    }
}

/// Per-window log-posteriors with their true labels.
#[derive(Debug, Clone)]
pub struct ScoredWindows {
    pub driver_ids: Vec<String>,
    pub truth: Vec<String>,
    pub log_prob: Vec<Vec<f64>>,
}

impl ScoredWindows {
    pub fn score(model: &GenerativeModel, windows: &[CarFollowingSequence]) -> Result<Self> {
        let truth = windows
            .iter()
            .map(|w| {
                w.driver_id()
                    .map(str::to_owned)
                    .ok_or_else(|| Error::invalid(format!("test window `{}` has no driver id", w.source_id())))
            })
            .collect::<Result<Vec<_>>>()?;
        let log_prob = par::map(windows, |w| {
            let x = model.featurize(w)?;
            Ok(model.posterior(&x)?.log_prob)
        })
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
        Ok(ScoredWindows {
            driver_ids: model.driver_ids().to_vec(),
            truth,
            log_prob,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n_sequences: usize,
    pub accuracy: f64,
    pub n_trials: u64,
    pub confusion: ConfusionMatrix,
    /// Drivers with fewer than `n_sequences` windows.
    pub skipped: Vec<String>,
}

/// Evaluates pre-scored windows.
///
/// With `n = 1` every window is one trial. With `n > 1` each driver gets
/// `ceil(W_k / n)` trials, each drawing `n` distinct windows of that driver
/// (seeded), combined by summed log-posteriors.
pub fn evaluate_scored(scored: &ScoredWindows, n: usize, seed: u64) -> Result<EvalReport> {
    if n == 0 {
        return Err(Error::invalid("n_sequences must be >= 1"));
    }
    let labels: Vec<String> = scored
        .driver_ids
        .iter()
        .chain(&scored.truth)
        .cloned()
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let col_of: Vec<usize> = scored
        .driver_ids
        .iter()
        .map(|id| labels.binary_search(id).expect("label list contains every driver"))
        .collect();
    let k = scored.driver_ids.len();
    let mut cm = ConfusionMatrix::new(labels.clone());
    let mut skipped = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    for (row, label) in labels.iter().enumerate() {
        let mine: Vec<usize> = (0..scored.truth.len()).filter(|&i| &scored.truth[i] == label).collect();
        if mine.is_empty() {
            continue;
        }
        if n == 1 {
            for &i in &mine {
                cm.counts[row][col_of[argmax(&scored.log_prob[i])]] += 1;
            }
            continue;
        }
        if mine.len() < n {
            log::warn!("driver `{label}` has {} test windows, fewer than {n}; skipped", mine.len());
            skipped.push(label.clone());
            continue;
        }
        for _ in 0..mine.len().div_ceil(n) {
            let picks = sample(&mut rng, mine.len(), n);
            let scores = combine_log_posteriors(picks.iter().map(|p| scored.log_prob[mine[p]].as_slice()), k);
            cm.counts[row][col_of[argmax(&scores)]] += 1;
        }
    }
    Ok(EvalReport {
        n_sequences: n,
        accuracy: cm.accuracy(),
        n_trials: cm.total(),
        confusion: cm,
        skipped,
    })
}

/// Scores `windows` with `model` and evaluates with `n` windows per trial.
pub fn evaluate(model: &GenerativeModel, windows: &[CarFollowingSequence], n: usize, seed: u64) -> Result<EvalReport> {
    evaluate_scored(&ScoredWindows::score(model, windows)?, n, seed)
}

/// Accuracy for several trial sizes on the same scored windows.
pub fn multi_sequence_curve(scored: &ScoredWindows, ns: &[usize], seed: u64) -> Result<Vec<EvalReport>> {
    ns.iter().map(|&n| evaluate_scored(scored, n, seed)).collect()
}

/// Cartesian grid of hyperparameters; empty axes fall back to the base
/// configuration's value.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SweepGrid {
    pub q: Vec<usize>,
    pub m: Vec<usize>,
    pub window: Vec<f64>,
    pub overlap: Vec<f64>,
    pub repetitions: usize,
    /// Repetition `r` trains with seed `base_seed + r`.
    pub base_seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub q: usize,
    pub m: usize,
    pub window: f64,
    pub overlap: f64,
    pub train_acc: Vec<f64>,
    pub test_acc: Vec<f64>,
    pub n_train_windows: Vec<usize>,
    pub failures: Vec<String>,
}

impl SweepCell {
    fn mean(xs: &[f64]) -> Option<f64> {
        (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64)
    }

    pub fn mean_train(&self) -> Option<f64> {
        Self::mean(&self.train_acc)
    }

    pub fn mean_test(&self) -> Option<f64> {
        Self::mean(&self.test_acc)
    }
}

/// Q values, M values, and mean accuracy per `[q][m]` cell.
pub type QmHeatmap = (Vec<usize>, Vec<usize>, Vec<Vec<Option<f64>>>);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub grid: SweepGrid,
    pub repetitions: usize,
    pub seeds: Vec<u64>,
    pub cells: Vec<SweepCell>,
}

impl SweepResult {
    /// One row per cell.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("q,m,window,overlap,repetitions,train_acc,test_acc,train_windows,failures\n");
        for c in &self.cells {
            let opt = |x: Option<f64>| x.map(|v| v.to_string()).unwrap_or_default();
            let windows = c.n_train_windows.first().map(|n| n.to_string()).unwrap_or_default();
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{},{}",
                c.q,
                c.m,
                c.window,
                c.overlap,
                c.train_acc.len(),
                opt(c.mean_train()),
                opt(c.mean_test()),
                windows,
                c.failures.len()
            );
        }
        s
    }

    /// Q down the rows, M across the columns, for the first window/overlap
    /// value. `None` unless the grid has both Q and M axes.
    pub fn qm_heatmap(&self, test: bool) -> Option<QmHeatmap> {
        let first = self.cells.first()?;
        let mut qs: Vec<usize> = self.cells.iter().map(|c| c.q).collect();
        let mut ms: Vec<usize> = self.cells.iter().map(|c| c.m).collect();
        qs.sort();
        qs.dedup();
        ms.sort();
        ms.dedup();
        let vals = qs
            .iter()
            .map(|&q| {
                ms.iter()
                    .map(|&m| {
                        self.cells
                            .iter()
                            .find(|c| c.q == q && c.m == m && c.window == first.window && c.overlap == first.overlap)
                            .and_then(|c| if test { c.mean_test() } else { c.mean_train() })
                    })
                    .collect()
            })
            .collect();
        Some((qs, ms, vals))
    }

    pub fn qm_heatmap_csv(&self, test: bool) -> Option<String> {
        let (qs, ms, vals) = self.qm_heatmap(test)?;
        let mut s = String::from("Q\\M");
        for m in &ms {
            let _ = write!(s, ",{m}");
        }
        s.push('\n');
        for (q, row) in qs.iter().zip(vals) {
            let _ = write!(s, "{q}");
            for v in row {
                let _ = write!(s, ",{}", v.map(|x| x.to_string()).unwrap_or_default());
            }
            s.push('\n');
        }
        Some(s)
    }
}

/// Trains one model per grid cell and repetition; the data split stays
/// fixed and only the training seed changes between repetitions.
pub fn sweep(grid: &SweepGrid, train_raw: &Dataset, test_raw: &Dataset, base: &PipelineConfig) -> Result<SweepResult> {
    let reps = grid.repetitions.max(1);
    let or = |v: &[usize], d: usize| if v.is_empty() { vec![d] } else { v.to_vec() };
    let orf = |v: &[f64], d: f64| if v.is_empty() { vec![d] } else { v.to_vec() };
    let qs = or(&grid.q, base.training.q);
    let ms = or(&grid.m, base.training.m);
    let ws = orf(&grid.window, base.window);
    let os = orf(&grid.overlap, base.overlap);

    let mut cells_cfg = Vec::new();
    for &w in &ws {
        for &o in &os {
            for &q in &qs {
                for &m in &ms {
                    cells_cfg.push((q, m, w, o));
                }
            }
        }
    }
    let seeds: Vec<u64> = (0..reps as u64).map(|r| grid.base_seed + r).collect();
    let jobs: Vec<(usize, u64)> = (0..cells_cfg.len())
        .flat_map(|c| seeds.iter().map(move |&s| (c, s)))
        .collect();

    let runs = par::map(&jobs, |&(c, seed)| {
        let (q, m, window, overlap) = cells_cfg[c];
        let mut cfg = base.clone();
        cfg.window = window;
        cfg.overlap = overlap;
        cfg.training.q = q;
        cfg.training.m = m;
        cfg.training.seed = seed;
        let run = || -> Result<(f64, f64, usize)> {
            let fitted = fit(train_raw, &cfg)?;
            let model = fitted.model();
            let train_tab = FeatureTable::build(train_raw, &cfg.train_resample()?, &cfg.reaction_time)?;
            let test_tab = FeatureTable::build(test_raw, &cfg.test_resample()?, &cfg.reaction_time)?;
            let tr = evaluate(model, &train_tab.windows, 1, seed)?.accuracy;
            let te = evaluate(model, &test_tab.windows, 1, seed)?.accuracy;
            Ok((tr, te, fitted.n_train_windows))
        };
        run()
    });

    let mut cells: Vec<SweepCell> = cells_cfg
        .iter()
        .map(|&(q, m, window, overlap)| SweepCell {
            q,
            m,
            window,
            overlap,
            train_acc: Vec::new(),
            test_acc: Vec::new(),
            n_train_windows: Vec::new(),
            failures: Vec::new(),
        })
        .collect();
    for (&(c, seed), r) in jobs.iter().zip(runs) {
        match r {
            Ok((tr, te, nw)) => {
                cells[c].train_acc.push(tr);
                cells[c].test_acc.push(te);
                cells[c].n_train_windows.push(nw);
            }
            Err(e) => {
                log::warn!("sweep cell {c} seed {seed} failed: {e}");
                cells[c].failures.push(format!("seed {seed}: {e}"));
            }
        }
    }
    Ok(SweepResult {
        grid: grid.clone(),
        repetitions: reps,
        seeds,
        cells,
    })
}
