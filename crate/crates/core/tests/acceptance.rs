//! Acceptance scorecard: one `criterion N [...]: PASS|FAIL (...)` line per
//! criterion. Runs without the libtest harness so the lines always show;
//! the process exits non-zero if any criterion fails.

use std::time::{Duration, Instant};

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use drivprof::domain::{resample, CarFollowingSequence, Frame, ResampleConfig};
use drivprof::eval::{evaluate, multi_sequence_curve, ScoredWindows};
use drivprof::features::{ProjectionModel, ReactionTimeConfig, Standardizer, N_FEATURES};
use drivprof::io::model_to_json;
use drivprof::model::{
    em_fit, log_gaussian_pdf, log_mixture_density, log_sum_exp, register_driver, DriverProfile, DriverState,
    EmInit, GenerativeModel, ModelHyper, Posterior, ProfileFitConfig, StatePool,
};
use drivprof::pipeline::{fit, FeatureTable, PipelineConfig};
use drivprof::synthdata::{generate_corpus, split_dataset, CorpusSpec};
use drivprof::training::{loss, loss_gradient_wrt_a, train, MixtureParams, TrainingConfig, TrainingSet};

struct Verdict {
    n: u32,
    name: &'static str,
    pass: bool,
    detail: String,
}

fn verdict(n: u32, name: &'static str, pass: bool, detail: String) -> Verdict {
    Verdict { n, name, pass, detail }
}

fn secs(d: Duration) -> f64 {
    d.as_secs_f64()
}

fn gauss(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn random_spd(m: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    let b = DMatrix::from_fn(m, m, |_, _| gauss(rng));
    &b * b.transpose() / m as f64 + DMatrix::identity(m, m) * 0.3
}

fn random_state(m: usize, spread: f64, rng: &mut ChaCha8Rng) -> DriverState {
    let mu = DVector::from_fn(m, |_, _| spread * gauss(rng));
    DriverState::new(mu, random_spd(m, rng)).unwrap()
}

fn random_profile(q: usize, rng: &mut ChaCha8Rng) -> DriverProfile {
    let w: Vec<f64> = (0..q).map(|_| rng.random_range(0.05..1.0)).collect();
    let s: f64 = w.iter().sum();
    DriverProfile::new(w.into_iter().map(|x| x / s).collect()).unwrap()
}

fn hyper(m: usize, q: usize) -> ModelHyper {
    ModelHyper {
        m,
        q,
        window: 15.0,
        overlap: 0.0,
        reaction_time: ReactionTimeConfig::default(),
        seed: 0,
    }
}

fn identity_standardizer() -> Standardizer {
    Standardizer {
        mean: [0.0; N_FEATURES],
        std: [1.0; N_FEATURES],
    }
}

fn criterion_1_em_monotone_on_hard8() -> Verdict {
    let corpus = generate_corpus(&CorpusSpec::hard8(0)).unwrap();
    let cfg = PipelineConfig::default();
    let table = FeatureTable::build(&corpus, &cfg.train_resample().unwrap(), &cfg.reaction_time).unwrap();
    let std = Standardizer::fit(&table.raw).unwrap();
    let set = table.training_set(&std, &corpus.driver_ids()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a = ProjectionModel::random_orthonormal(4, &mut rng).unwrap();
    let points = set.project(&a).unwrap();

    let t0 = Instant::now();
    let fit = em_fit(&points, 16, EmInit::Random, 50, &mut rng).unwrap();
    let elapsed = t0.elapsed();

    let ll = &fit.log_likelihood;
    let worst = ll.windows(2).map(|w| w[0] - w[1]).fold(f64::NEG_INFINITY, f64::max);
    let pass = ll.len() == 51 && worst <= 1e-8 && fit.reseeds == 0 && elapsed < Duration::from_secs(10);
    verdict(
        1,
        "EM monotonicity",
        pass,
        format!(
            "{} windows, ll {:.3} -> {:.3}, largest drop {worst:.2e}, reseeds {}, {:.2}s",
            points.len(),
            ll[0],
            ll[50],
            fit.reseeds,
            secs(elapsed)
        ),
    )
}

fn criterion_2_gradient_matches_finite_differences() -> Verdict {
    let (m, q, k, n) = (2, 3, 2, 20);
    let h = 1e-5;
    let t0 = Instant::now();
    let mut worst = 0.0f64;
    for seed in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        let features: Vec<[f64; N_FEATURES]> = (0..n).map(|_| std::array::from_fn(|_| gauss(&mut rng))).collect();
        let labels: Vec<usize> = (0..n).map(|i| i % k).collect();
        let set = TrainingSet::new(features, labels, vec!["a".into(), "b".into()]).unwrap();
        let a_data: Vec<f64> = (0..m * N_FEATURES).map(|_| 0.5 * gauss(&mut rng)).collect();
        let a = ProjectionModel::from_row_major(m, &a_data).unwrap();
        let params = MixtureParams {
            states: (0..q).map(|_| random_state(m, 1.0, &mut rng)).collect(),
            profiles: (0..k).map(|_| random_profile(q, &mut rng)).collect(),
        };
        let grad = loss_gradient_wrt_a(&set, &a, &params).unwrap();
        let eval = |data: &[f64]| {
            let pa = ProjectionModel::from_row_major(m, data).unwrap();
            loss(&set.project(&pa).unwrap(), &params).unwrap()
        };
        for i in 0..m {
            for j in 0..N_FEATURES {
                let idx = i * N_FEATURES + j;
                let mut up = a_data.clone();
                let mut dn = a_data.clone();
                up[idx] += h;
                dn[idx] -= h;
                let fd = (eval(&up) - eval(&dn)) / (2.0 * h);
                let an = grad[(i, j)];
                let rel = (an - fd).abs() / an.abs().max(fd.abs()).max(1e-6);
                worst = worst.max(rel);
            }
        }
    }
    let elapsed = t0.elapsed();
    verdict(
        2,
        "gradient correctness",
        worst < 1e-4 && elapsed < Duration::from_secs(5),
        format!("20 instances, max relative error {worst:.2e}, {:.2}s", secs(elapsed)),
    )
}

fn criterion_3_posterior_normalization() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst = 0.0f64;
    let mut draws = 0;
    for _ in 0..100 {
        let m = rng.random_range(1..=8);
        let q = rng.random_range(1..=12);
        let k = rng.random_range(2..=8);
        let states: Vec<DriverState> = (0..q).map(|_| random_state(m, 3.0, &mut rng)).collect();
        let profiles: Vec<(String, DriverProfile)> =
            (0..k).map(|i| (format!("D{i}"), random_profile(q, &mut rng))).collect();
        let proj = ProjectionModel::random_orthonormal(m, &mut rng).unwrap();
        let model = GenerativeModel::new(identity_standardizer(), proj, states, profiles, hyper(m, q)).unwrap();
        for _ in 0..100 {
            // some draws land far in the tails to exercise underflow
            let scale = if rng.random_bool(0.1) { 200.0 } else { 3.0 };
            let x = DVector::from_fn(m, |_, _| scale * gauss(&mut rng));
            let p = model.posterior(&x).unwrap();
            let s: f64 = p.prob.iter().sum();
            worst = worst.max((s - 1.0).abs());
            draws += 1;
        }
    }
    verdict(
        3,
        "posterior normalization",
        worst <= 1e-10,
        format!("{draws} draws, max |sum - 1| = {worst:.2e}"),
    )
}

fn criterion_4_compensated_rescaling_invariance() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst = 0.0f64;
    let mut draws = 0;
    for _ in 0..50 {
        let m = rng.random_range(1..=6);
        let q = rng.random_range(1..=8);
        let k = rng.random_range(2..=6);
        let states: Vec<DriverState> = (0..q).map(|_| random_state(m, 2.0, &mut rng)).collect();
        let profiles: Vec<DriverProfile> = (0..k).map(|_| random_profile(q, &mut rng)).collect();
        let d = DVector::from_fn(m, |_, _| (rng.random_range(-3.0..3.0f64)).exp());
        let dm = DMatrix::from_diagonal(&d);
        let scaled: Vec<DriverState> = states
            .iter()
            .map(|s| DriverState::new(&dm * &s.mu, &dm * &s.sigma * &dm).unwrap())
            .collect();
        let pool = StatePool::new(states).unwrap();
        let pool2 = StatePool::new(scaled).unwrap();
        for _ in 0..20 {
            let x = DVector::from_fn(m, |_, _| 2.0 * gauss(&mut rng));
            let x2 = &dm * &x;
            let post = |pool: &StatePool, x: &DVector<f64>| {
                let ld = profiles.iter().map(|p| log_mixture_density(x, p, pool).unwrap()).collect();
                Posterior::from_log_density(ld)
            };
            let p1 = post(&pool, &x);
            let p2 = post(&pool2, &x2);
            for (a, b) in p1.prob.iter().zip(&p2.prob) {
                worst = worst.max((a - b).abs());
            }
            draws += 1;
        }
    }
    verdict(
        4,
        "rescaling invariance",
        worst <= 1e-10,
        format!("{draws} draws, max posterior change {worst:.2e}"),
    )
}

fn criterion_5_resampling_law() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut mismatches = 0;
    for case in 0..1000 {
        // durations in whole frames keep the law free of rounding edges
        let dt = [0.1, 0.05, 0.2][case % 3];
        let t_frames: usize = rng.random_range(5..60);
        let stride_frames: usize = rng.random_range(1..=t_frames);
        let l_frames: usize = rng.random_range(1..400);
        let window = t_frames as f64 * dt;
        let overlap = 1.0 - stride_frames as f64 / t_frames as f64;
        let frames = vec![Frame::new(10.0, 0.0, 20.0, 0.0); l_frames];
        let seq = CarFollowingSequence::new(frames, dt, Some("D".into()), "s").unwrap();
        let cfg = ResampleConfig::new(window, overlap).unwrap();
        let expected = if l_frames < t_frames {
            0
        } else {
            (l_frames - t_frames) / stride_frames + 1
        };
        let got = resample(&seq, &cfg);
        let ok = got.len() == expected
            && cfg.window_count(seq.duration()) == expected
            && got.iter().all(|w| w.len() == t_frames);
        if !ok {
            mismatches += 1;
        }
    }

    let corpus = generate_corpus(&CorpusSpec::hard8(0)).unwrap();
    let counts: Vec<usize> = [0.0, 0.25, 0.5]
        .iter()
        .map(|&r| corpus.resample(&ResampleConfig::new(15.0, r).unwrap()).len())
        .collect();
    let increasing = counts[0] < counts[1] && counts[1] < counts[2];
    verdict(
        5,
        "resampling law",
        mismatches == 0 && increasing,
        format!("1000 cases, {mismatches} mismatches; hard8 windows at r=0/0.25/0.5: {counts:?}"),
    )
}

fn criterion_6_easy4_identification() -> Verdict {
    let t0 = Instant::now();
    let seed = 0;
    let corpus = generate_corpus(&CorpusSpec::easy4(seed)).unwrap();
    let (train_ds, test_ds) = split_dataset(&corpus, 0.8, seed).unwrap();
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
    let fitted = fit(&train_ds, &cfg).unwrap();
    let tab = FeatureTable::build(&test_ds, &cfg.test_resample().unwrap(), &cfg.reaction_time).unwrap();
    let scored = ScoredWindows::score(fitted.model(), &tab.windows).unwrap();
    let curve = multi_sequence_curve(&scored, &[1, 5, 10], seed).unwrap();
    let (a1, a5, a10) = (curve[0].accuracy, curve[1].accuracy, curve[2].accuracy);
    let elapsed = t0.elapsed();
    let pass = a1 > 0.5 && a10 >= a5 && a5 >= a1 && a10 >= 0.9 && elapsed < Duration::from_secs(300);
    verdict(
        6,
        "easy4 identification",
        pass,
        format!(
            "{} test windows, acc(1) {a1:.4}, acc(5) {a5:.4}, acc(10) {a10:.4}, {:.1}s",
            tab.len(),
            secs(elapsed)
        ),
    )
}

fn criterion_7_registration_equivalence() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let (m, q) = (3, 6);
    let states: Vec<DriverState> = (0..q).map(|_| random_state(m, 2.5, &mut rng)).collect();
    let profiles: Vec<(String, DriverProfile)> =
        (0..3).map(|i| (format!("D{i}"), random_profile(q, &mut rng))).collect();
    let proj = ProjectionModel::random_orthonormal(m, &mut rng).unwrap();
    let model = GenerativeModel::new(identity_standardizer(), proj, states.clone(), profiles, hyper(m, q)).unwrap();

    // new driver: samples from its own mixture over the frozen states
    let truth = random_profile(q, &mut rng);
    let feats: Vec<DVector<f64>> = (0..300)
        .map(|_| {
            let u: f64 = rng.random();
            let mut acc = 0.0;
            let c = truth
                .weights()
                .iter()
                .position(|w| {
                    acc += w;
                    u < acc
                })
                .unwrap_or(q - 1);
            let l = states[c].sigma.clone().cholesky().unwrap().l();
            &states[c].mu + l * DVector::from_fn(m, |_, _| gauss(&mut rng))
        })
        .collect();

    let registered = register_driver(&model, "NEW", &feats, ProfileFitConfig::default()).unwrap();

    // oracle: weights-only EM written directly from the state densities
    let log_pdf: Vec<Vec<f64>> = feats
        .iter()
        .map(|x| states.iter().map(|s| log_gaussian_pdf(x, s).unwrap()).collect())
        .collect();
    let mut w = vec![1.0 / q as f64; q];
    for _ in 0..50_000 {
        let mut next = vec![0.0; q];
        for lp in &log_pdf {
            let t: Vec<f64> = lp.iter().zip(&w).map(|(l, wq)| l + wq.ln()).collect();
            let z = log_sum_exp(&t);
            for (nq, tq) in next.iter_mut().zip(&t) {
                *nq += (tq - z).exp() / feats.len() as f64;
            }
        }
        let delta = next.iter().zip(&w).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        w = next;
        if delta < 1e-14 {
            break;
        }
    }
    let got = registered.profile("NEW").unwrap().weights();
    let diff = got.iter().zip(&w).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);

    let untouched = registered.states() == model.states()
        && registered.projection() == model.projection()
        && registered.standardizer() == model.standardizer()
        && model.driver_ids().iter().all(|id| {
            let a = model.profile(id).unwrap().weights();
            let b = registered.profile(id).unwrap().weights();
            a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
        });
    verdict(
        7,
        "registration equivalence",
        diff < 1e-6 && untouched,
        format!("max |omega - oracle| {diff:.2e}, existing parameters bit-identical: {untouched}"),
    )
}

fn criterion_8_training_loop_mechanics() -> Verdict {
    let mut corpus_spec = CorpusSpec::hard8(8);
    corpus_spec.sequences_per_driver = 12;
    let corpus = generate_corpus(&corpus_spec).unwrap();
    let pcfg = PipelineConfig::default();
    let table = FeatureTable::build(&corpus, &pcfg.train_resample().unwrap(), &pcfg.reaction_time).unwrap();
    let std = Standardizer::fit(&table.raw).unwrap();
    let set = table.training_set(&std, &corpus.driver_ids()).unwrap();

    let mut failures = Vec::new();
    let (mut ups, mut downs, mut capped) = (0, 0, 0);
    for (seed, lr) in [(0u64, 0.1), (1, 0.05), (2, 0.1), (3, 0.02)] {
        let cfg = TrainingConfig {
            m: 3,
            q: 6,
            n_outer: 40,
            n_final_em: 20,
            lr,
            seed,
            ..TrainingConfig::default()
        };
        let out = train(&set, &std, &cfg, 15.0, 0.0, ReactionTimeConfig::default()).unwrap();
        let rows = &out.trace.rows;
        if rows[0].lr != lr {
            failures.push(format!("seed {seed}: initial lr"));
        }
        let mut prev_loss = rows[0].loss;
        for w in rows.windows(2) {
            let improved = w[1].loss < prev_loss;
            let expect = if improved {
                (w[0].lr * 1.1).min(0.1)
            } else {
                w[0].lr * 0.5
            };
            if w[1].lr.to_bits() != expect.to_bits() {
                failures.push(format!("seed {seed} iter {}: lr {} expected {expect}", w[1].iter, w[1].lr));
            }
            if improved {
                ups += 1;
                if w[0].lr * 1.1 > 0.1 {
                    capped += 1;
                }
            } else {
                downs += 1;
            }
            if w[1].best_loss > w[0].best_loss {
                failures.push(format!("seed {seed} iter {}: best loss increased", w[1].iter));
            }
            prev_loss = w[1].loss;
        }
        for (i, a) in out.trace.projections.iter().enumerate() {
            for r in a.chunks(N_FEATURES) {
                let norm = r.iter().map(|x| x * x).sum::<f64>().sqrt();
                if (norm - 1.0).abs() > 1e-12 {
                    failures.push(format!("seed {seed} iter {i}: row norm {norm}"));
                }
            }
        }
    }
    verdict(
        8,
        "training loop mechanics",
        failures.is_empty() && ups > capped && capped > 0 && downs > 0,
        format!(
            "4 runs, {ups} increases ({capped} capped), {downs} decreases, violations: {}",
            if failures.is_empty() { "none".to_string() } else { failures.join("; ") }
        ),
    )
}

fn criterion_9_determinism() -> Verdict {
    let run = || {
        let mut spec = CorpusSpec::easy4(9);
        spec.sequences_per_driver = 15;
        let corpus = generate_corpus(&spec).unwrap();
        let (train_ds, test_ds) = split_dataset(&corpus, 0.8, 9).unwrap();
        let cfg = PipelineConfig {
            training: TrainingConfig {
                m: 2,
                q: 5,
                n_outer: 4,
                n_final_em: 30,
                seed: 9,
                ..TrainingConfig::default()
            },
            ..PipelineConfig::default()
        };
        let fitted = fit(&train_ds, &cfg).unwrap();
        let tab = FeatureTable::build(&test_ds, &cfg.test_resample().unwrap(), &cfg.reaction_time).unwrap();
        let report = evaluate(fitted.model(), &tab.windows, 3, 9).unwrap();
        (
            model_to_json(fitted.model()).unwrap(),
            fitted.output.trace.to_csv(),
            serde_json::to_string(&report).unwrap() + &report.confusion.to_csv(),
        )
    };
    let a = run();
    let b = run();
    verdict(
        9,
        "determinism",
        a == b,
        format!(
            "model.json {} bytes, trace {} bytes, report {} bytes; identical: {}/{}/{}",
            a.0.len(),
            a.1.len(),
            a.2.len(),
            a.0 == b.0,
            a.1 == b.1,
            a.2 == b.2
        ),
    )
}

fn main() {
    let criteria: [fn() -> Verdict; 9] = [
        criterion_1_em_monotone_on_hard8,
        criterion_2_gradient_matches_finite_differences,
        criterion_3_posterior_normalization,
        criterion_4_compensated_rescaling_invariance,
        criterion_5_resampling_law,
        criterion_6_easy4_identification,
        criterion_7_registration_equivalence,
        criterion_8_training_loop_mechanics,
        criterion_9_determinism,
    ];
    let mut failed = 0;
    for (i, c) in criteria.iter().enumerate() {
        let v = std::panic::catch_unwind(c).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            verdict(i as u32 + 1, "panicked", false, msg)
        });
        println!(
            "criterion {} [{}]: {} ({})",
            v.n,
            v.name,
            if v.pass { "PASS" } else { "FAIL" },
            v.detail
        );
        failed += usize::from(!v.pass);
    }
    println!("acceptance: {} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
