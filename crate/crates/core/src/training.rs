//! Joint learning of the projection `A` with the state pool and profiles.
//!
//! Each outer iteration runs a few EM steps for the current `A` (warm
//! started from the previous iteration), takes a gradient step on `A` with
//! the states and profiles held fixed, and renormalizes the rows of `A`.
//! The learning rate grows by `lr_up` after an improvement (capped at
//! `lr_max`) and shrinks by `lr_down` otherwise. The lowest-loss parameters
//! seen are cached, and a long EM run from that snapshot produces the final
//! model.
//!
//! The gradient ignores how the EM optimum itself moves with `A`; only the
//! explicit dependence through `x = A·x̃` is differentiated. Convergence is
//! therefore heuristic, and the best-result cache is what guarantees the
//! returned loss never exceeds the initial one.

use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::features::{ProjectionModel, ReactionTimeConfig, Standardizer, N_FEATURES};
use crate::model::{
    argmax, em_fit, log_sum_exp, DriverProfile, DriverState, EmInit, GenerativeModel, LabeledPoints,
    ModelHyper, StatePool,
};
use crate::{par, Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainingConfig {
    pub m: usize,
    pub q: usize,
    pub n_outer: usize,
    pub n_inner: usize,
    /// Initial learning rate.
    pub lr: f64,
    pub lr_up: f64,
    pub lr_down: f64,
    pub lr_max: f64,
    pub n_final_em: usize,
    pub seed: u64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            m: 4,
            q: 28,
            n_outer: 10,
            n_inner: 10,
            lr: 0.1,
            lr_up: 1.1,
            lr_down: 0.5,
            lr_max: 0.1,
            n_final_em: 200,
            seed: 0,
        }
    }
}

impl TrainingConfig {
    /// `lr = 0` is accepted and freezes `A`, which reduces training to EM.
    pub fn check(&self) -> Result<()> {
        if self.m == 0 || self.m > N_FEATURES {
            return Err(Error::invalid(format!("M = {} must be in 1..=8", self.m)));
        }
        if self.q == 0 {
            return Err(Error::invalid("Q must be >= 1"));
        }
        if self.n_inner == 0 {
            return Err(Error::invalid("n_inner must be >= 1"));
        }
        if !(self.lr_up > 1.0 && self.lr_down > 0.0 && self.lr_down < 1.0) {
            return Err(Error::invalid("learning-rate factors must satisfy lr_up > 1 > lr_down > 0"));
        }
        if !(self.lr >= 0.0 && self.lr <= self.lr_max) {
            return Err(Error::invalid(format!(
                "initial learning rate {} must lie in [0, lr_max = {}]",
                self.lr, self.lr_max
            )));
        }
        Ok(())
    }

    /// Learning rate after one outer step.
    pub fn adapt_lr(&self, lr: f64, improved: bool) -> f64 {
        if improved {
            (self.lr_up * lr).min(self.lr_max)
        } else {
            self.lr_down * lr
        }
    }
}

/// Standardized features with driver labels; the input of [`train`].
#[derive(Debug, Clone)]
pub struct TrainingSet {
    pub features: Vec<[f64; N_FEATURES]>,
    pub labels: Vec<usize>,
    pub driver_ids: Vec<String>,
}

impl TrainingSet {
    pub fn new(features: Vec<[f64; N_FEATURES]>, labels: Vec<usize>, driver_ids: Vec<String>) -> Result<Self> {
        if features.len() != labels.len() {
            return Err(Error::DimensionMismatch {
                expected: features.len(),
                got: labels.len(),
            });
        }
        if let Some(l) = labels.iter().find(|&&l| l >= driver_ids.len()) {
            return Err(Error::invalid(format!("label {l} has no driver id")));
        }
        Ok(TrainingSet {
            features,
            labels,
            driver_ids,
        })
    }

    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    pub fn project(&self, a: &ProjectionModel) -> Result<LabeledPoints> {
        let points = par::map(&self.features, |f| a.project(f))
            .into_iter()
            .collect::<Result<Vec<_>>>()?;
        LabeledPoints::new(points, self.labels.clone(), self.driver_ids.len())
    }
}

/// Mixture parameters evaluated against a fixed projection.
#[derive(Debug, Clone)]
pub struct MixtureParams {
    pub states: Vec<DriverState>,
    pub profiles: Vec<DriverProfile>,
}

struct SampleTerms {
    /// `−log P(k_gt | x)`.
    loss: f64,
    /// `∂ loss / ∂x`.
    grad_x: Option<DVector<f64>>,
    correct: bool,
}

fn sample_terms(
    x: &DVector<f64>,
    label: usize,
    pool: &StatePool,
    profiles: &[DriverProfile],
    with_grad: bool,
) -> SampleTerms {
    let lc = pool.log_components(x);
    // per driver: within-driver log terms and log p_k(x)
    let mut log_terms = Vec::with_capacity(profiles.len());
    let mut log_pk = Vec::with_capacity(profiles.len());
    for p in profiles {
        let t: Vec<f64> = p.weights().iter().zip(&lc).map(|(w, l)| w.ln() + l).collect();
        log_pk.push(log_sum_exp(&t));
        log_terms.push(t);
    }
    let lse = log_sum_exp(&log_pk);
    let loss = lse - log_pk[label];
    let correct = argmax(&log_pk) == label;
    let grad_x = with_grad.then(|| {
        // g_q = Σ_q⁻¹(x − μ_q) = −∇ log N_q(x)
        let g: Vec<DVector<f64>> = pool
            .prepared()
            .iter()
            .map(|s| s.precision_times_residual(x))
            .collect();
        let mut out = DVector::zeros(x.len());
        for (k, terms) in log_terms.iter().enumerate() {
            // ∂(−log P(gt|x))/∂x = Σ_k (1[k=gt] − P(k|x)) · Σ_q γ̃_kq g_q
            let coef = if k == label { 1.0 } else { 0.0 } - (log_pk[k] - lse).exp();
            if coef == 0.0 || log_pk[k] == f64::NEG_INFINITY {
                continue;
            }
            for (q, t) in terms.iter().enumerate() {
                let r = (t - log_pk[k]).exp();
                if r > 0.0 {
                    out.axpy(coef * r, &g[q], 1.0);
                }
            }
        }
        out
    });
    SampleTerms { loss, grad_x, correct }
}

fn check_labels(points: &LabeledPoints, profiles: &[DriverProfile]) -> Result<()> {
    if points.n_drivers != profiles.len() {
        return Err(Error::invalid(format!(
            "{} drivers in data but {} profiles",
            points.n_drivers,
            profiles.len()
        )));
    }
    Ok(())
}

fn non_finite(terms: &[SampleTerms]) -> Result<()> {
    if let Some(n) = terms.iter().position(|t| !t.loss.is_finite()) {
        return Err(Error::NonFinite(format!("loss term of sample {n}")));
    }
    Ok(())
}

/// `L = Σ_n −log P(k_n | x_n)` over labeled projected points.
pub fn loss(points: &LabeledPoints, params: &MixtureParams) -> Result<f64> {
    check_labels(points, &params.profiles)?;
    let pool = StatePool::new(params.states.clone())?;
    let terms = par::map_range(points.len(), |n| {
        sample_terms(&points.points[n], points.labels[n], &pool, &params.profiles, false)
    });
    non_finite(&terms)?;
    Ok(terms.iter().map(|t| t.loss).sum())
}

/// Fraction of points whose maximum-posterior driver is their label.
pub fn accuracy(points: &LabeledPoints, params: &MixtureParams) -> Result<f64> {
    check_labels(points, &params.profiles)?;
    let pool = StatePool::new(params.states.clone())?;
    let terms = par::map_range(points.len(), |n| {
        sample_terms(&points.points[n], points.labels[n], &pool, &params.profiles, false)
    });
    Ok(terms.iter().filter(|t| t.correct).count() as f64 / points.len().max(1) as f64)
}

/// Loss and its gradient with respect to `A`, holding states and profiles
/// fixed: `∂L/∂A = Σ_n (∂L_n/∂x_n) x̃_nᵀ`.
pub fn loss_and_gradient(
    set: &TrainingSet,
    a: &ProjectionModel,
    params: &MixtureParams,
) -> Result<(f64, DMatrix<f64>)> {
    let points = set.project(a)?;
    check_labels(&points, &params.profiles)?;
    let pool = StatePool::new(params.states.clone())?;
    let m = a.dim();
    let idx: Vec<usize> = (0..points.len()).collect();
    let chunks = par::map_chunks(&idx, |_, chunk| {
        let terms: Vec<SampleTerms> = chunk
            .iter()
            .map(|&n| sample_terms(&points.points[n], points.labels[n], &pool, &params.profiles, true))
            .collect();
        let mut g = DMatrix::zeros(m, N_FEATURES);
        for (t, &n) in terms.iter().zip(chunk) {
            let gx = t.grad_x.as_ref().expect("gradient requested");
            g.ger(1.0, gx, &DVector::from_column_slice(&set.features[n]), 1.0);
        }
        (terms, g)
    });
    let mut total = 0.0;
    let mut grad = DMatrix::zeros(m, N_FEATURES);
    for (terms, g) in chunks {
        non_finite(&terms)?;
        total += terms.iter().map(|t| t.loss).sum::<f64>();
        grad += g;
    }
    Ok((total, grad))
}

/// Gradient of the loss with respect to `A`.
pub fn loss_gradient_wrt_a(set: &TrainingSet, a: &ProjectionModel, params: &MixtureParams) -> Result<DMatrix<f64>> {
    loss_and_gradient(set, a, params).map(|(_, g)| g)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub iter: usize,
    pub loss: f64,
    pub train_acc: f64,
    /// Learning rate after this iteration's adaptation (the initial rate on
    /// row 0).
    pub lr: f64,
    pub is_best: bool,
    pub best_loss: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingTrace {
    pub rows: Vec<TraceRow>,
    /// Rows of `A` after each iteration (row-major), row 0 being the
    /// initialization.
    #[serde(skip)]
    pub projections: Vec<Vec<f64>>,
}

impl TrainingTrace {
    /// `iter,loss,train_acc,lr,is_best`
    pub fn to_csv(&self) -> String {
        let mut s = String::from("iter,loss,train_acc,lr,is_best\n");
        for r in &self.rows {
            let _ = writeln!(s, "{},{},{},{},{}", r.iter, r.loss, r.train_acc, r.lr, r.is_best as u8);
        }
        s
    }
}

/// First draw of the training RNG: the initial projection.
pub fn initial_projection(m: usize, rng: &mut ChaCha8Rng) -> Result<ProjectionModel> {
    ProjectionModel::random_orthonormal(m, rng)
}

pub struct TrainOutput {
    pub model: GenerativeModel,
    pub trace: TrainingTrace,
    /// Final long EM log-likelihood trace.
    pub final_em: Vec<f64>,
}

/// Runs the outer loop.
///
/// `standardizer` must be the one `set.features` were standardized with; it
/// is stored in the returned model together with `window`, `overlap` and
/// `reaction_time`.
pub fn train(
    set: &TrainingSet,
    standardizer: &Standardizer,
    cfg: &TrainingConfig,
    window: f64,
    overlap: f64,
    reaction_time: ReactionTimeConfig,
) -> Result<TrainOutput> {
    cfg.check()?;
    if set.driver_ids.len() < 2 {
        return Err(Error::invalid("training needs at least two drivers"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut a = initial_projection(cfg.m, &mut rng)?;

    let points = set.project(&a)?;
    let fit = em_fit(&points, cfg.q, EmInit::Random, cfg.n_inner, &mut rng)?;
    let mut params = MixtureParams {
        states: fit.states,
        profiles: fit.profiles,
    };
    let mut cur_loss = loss(&points, &params)?;
    let mut lr = cfg.lr;
    let mut best = (cur_loss, a.clone(), params.clone());
    let mut trace = TrainingTrace::default();
    trace.rows.push(TraceRow {
        iter: 0,
        loss: cur_loss,
        train_acc: accuracy(&points, &params)?,
        lr,
        is_best: true,
        best_loss: cur_loss,
    });
    trace.projections.push(a.to_row_major());

    for iter in 1..=cfg.n_outer {
        let next_a = if lr == 0.0 {
            a.clone()
        } else {
            // Step on the per-window mean so `lr` does not scale with N.
            let grad = loss_gradient_wrt_a(set, &a, &params)? / set.len() as f64;
            let mut next = a.stepped(&grad, lr)?;
            next.normalize_rows();
            next
        };
        let points = set.project(&next_a)?;
        let fit = em_fit(
            &points,
            cfg.q,
            EmInit::Warm {
                states: params.states.clone(),
                profiles: params.profiles.clone(),
            },
            cfg.n_inner,
            &mut rng,
        )?;
        let next_params = MixtureParams {
            states: fit.states,
            profiles: fit.profiles,
        };
        let next_loss = loss(&points, &next_params)?;
        lr = cfg.adapt_lr(lr, next_loss < cur_loss);
        let is_best = next_loss < best.0;
        if is_best {
            best = (next_loss, next_a.clone(), next_params.clone());
        }
        trace.rows.push(TraceRow {
            iter,
            loss: next_loss,
            train_acc: accuracy(&points, &next_params)?,
            lr,
            is_best,
            best_loss: best.0,
        });
        trace.projections.push(next_a.to_row_major());
        log::debug!("outer {iter}: loss {next_loss:.4} lr {lr:.5}{}", if is_best { " *" } else { "" });
        a = next_a;
        params = next_params;
        cur_loss = next_loss;
    }

    let (_, best_a, best_params) = best;
    let points = set.project(&best_a)?;
    let fit = em_fit(
        &points,
        cfg.q,
        EmInit::Warm {
            states: best_params.states,
            profiles: best_params.profiles,
        },
        cfg.n_final_em,
        &mut rng,
    )?;
    let hyper = ModelHyper {
        m: cfg.m,
        q: cfg.q,
        window,
        overlap,
        reaction_time,
        seed: cfg.seed,
    };
    let model = GenerativeModel::new(
        standardizer.clone(),
        best_a,
        fit.states,
        set.driver_ids.iter().cloned().zip(fit.profiles).collect(),
        hyper,
    )?;
    Ok(TrainOutput {
        model,
        trace,
        final_em: fit.log_likelihood,
    })
}
