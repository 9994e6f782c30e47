//! Shared-state Gaussian mixture with per-driver profiles.
//!
//! `Q` Gaussian driver states live in the projected `M`-dimensional feature
//! space and are shared by every driver. Driver `k` owns a profile `ω_k`, a
//! distribution over those states, so its feature density is
//! `p_k(x) = Σ_q ω_kq N(x | μ_q, Σ_q)`. All density arithmetic is done in
//! the log domain.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, SymmetricEigen};
use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::domain::CarFollowingSequence;
use crate::features::{extract_features, ProjectionModel, ReactionTimeConfig, Standardizer};
use crate::{par, Error, Result};

/// Smallest admissible covariance eigenvalue after an M-step.
pub const COV_FLOOR: f64 = 1e-6;

/// States whose total responsibility falls below this are reseeded.
pub const EMPTY_STATE_MASS: f64 = 1e-8;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// `log Σ exp(xs)`; `-inf` for an empty or all `-inf` input.
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    if max == f64::INFINITY {
        return f64::INFINITY;
    }
    max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// Index of the largest value; ties go to the smallest index.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate().skip(1) {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// One Gaussian state `N(μ, Σ)`.
#[derive(Debug, Clone, PartialEq)]
pub struct DriverState {
    pub mu: DVector<f64>,
    pub sigma: DMatrix<f64>,
}

impl DriverState {
    pub fn new(mu: DVector<f64>, sigma: DMatrix<f64>) -> Result<Self> {
        let m = mu.len();
        if sigma.shape() != (m, m) {
            return Err(Error::DimensionMismatch {
                expected: m * m,
                got: sigma.len(),
            });
        }
        if mu.iter().chain(sigma.iter()).any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("driver state".into()));
        }
        for i in 0..m {
            for j in 0..i {
                let (a, b) = (sigma[(i, j)], sigma[(j, i)]);
                if (a - b).abs() > 1e-12 * (1.0 + a.abs().max(b.abs())) {
                    return Err(Error::invalid("covariance matrix is not symmetric"));
                }
            }
        }
        Ok(DriverState { mu, sigma })
    }

    pub fn standard(m: usize) -> Self {
        DriverState {
            mu: DVector::zeros(m),
            sigma: DMatrix::identity(m, m),
        }
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }
}

/// A state with its Cholesky factor and normalizing constant precomputed.
#[derive(Debug, Clone)]
pub struct PreparedState {
    mu: DVector<f64>,
    chol: Cholesky<f64, Dyn>,
    /// `-(M log 2π + log|Σ|) / 2`
    log_norm: f64,
}

impl PreparedState {
    pub fn new(state: &DriverState) -> Result<Self> {
        let chol = Cholesky::new(state.sigma.clone()).ok_or(Error::NotPositiveDefinite)?;
        let log_det = 2.0 * chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>();
        if !log_det.is_finite() {
            return Err(Error::NotPositiveDefinite);
        }
        Ok(PreparedState {
            mu: state.mu.clone(),
            log_norm: -0.5 * (state.dim() as f64 * LN_2PI + log_det),
            chol,
        })
    }

    pub fn log_pdf(&self, x: &DVector<f64>) -> f64 {
        let d = x - &self.mu;
        let z = self
            .chol
            .l_dirty()
            .solve_lower_triangular(&d)
            .expect("cholesky factor has a positive diagonal");
        self.log_norm - 0.5 * z.norm_squared()
    }

    /// `Σ⁻¹ (x − μ)`.
    pub fn precision_times_residual(&self, x: &DVector<f64>) -> DVector<f64> {
        self.chol.solve(&(x - &self.mu))
    }
}

/// Log-density of `x` under `N(μ, Σ)`, via a Cholesky factorization.
pub fn log_gaussian_pdf(x: &DVector<f64>, state: &DriverState) -> Result<f64> {
    if x.len() != state.dim() {
        return Err(Error::DimensionMismatch {
            expected: state.dim(),
            got: x.len(),
        });
    }
    Ok(PreparedState::new(state)?.log_pdf(x))
}

/// The shared pool of states in evaluation-ready form.
#[derive(Debug, Clone)]
pub struct StatePool {
    states: Vec<DriverState>,
    prepared: Vec<PreparedState>,
}

impl StatePool {
    pub fn new(states: Vec<DriverState>) -> Result<Self> {
        let Some(first) = states.first() else {
            return Err(Error::invalid("state pool is empty"));
        };
        let m = first.dim();
        if let Some(s) = states.iter().find(|s| s.dim() != m) {
            return Err(Error::DimensionMismatch {
                expected: m,
                got: s.dim(),
            });
        }
        let prepared = states.iter().map(PreparedState::new).collect::<Result<_>>()?;
        Ok(StatePool { states, prepared })
    }

    pub fn states(&self) -> &[DriverState] {
        &self.states
    }

    pub fn prepared(&self) -> &[PreparedState] {
        &self.prepared
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.states[0].dim()
    }

    /// `log N(x | μ_q, Σ_q)` for every state.
    pub fn log_components(&self, x: &DVector<f64>) -> Vec<f64> {
        self.prepared.iter().map(|p| p.log_pdf(x)).collect()
    }
}

/// A driver's distribution over the state pool.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct DriverProfile {
    weights: Vec<f64>,
}

impl DriverProfile {
    pub fn new(weights: Vec<f64>) -> Result<Self> {
        if weights.is_empty() {
            return Err(Error::invalid("profile has no weights"));
        }
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::invalid("profile weights must be finite and non-negative"));
        }
        let sum: f64 = weights.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::invalid(format!("profile weights sum to {sum}, not 1")));
        }
        Ok(DriverProfile { weights })
    }

    pub fn uniform(q: usize) -> Self {
        DriverProfile {
            weights: vec![1.0 / q as f64; q],
        }
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    fn log_weights(&self) -> Vec<f64> {
        self.weights.iter().map(|w| w.ln()).collect()
    }
}

/// `log Σ_q ω_q exp(log_comp_q)`, skipping zero-weight states.
fn mix_log(weights: &[f64], log_comp: &[f64]) -> f64 {
    let terms: Vec<f64> = weights
        .iter()
        .zip(log_comp)
        .filter(|(w, _)| **w > 0.0)
        .map(|(w, l)| w.ln() + l)
        .collect();
    log_sum_exp(&terms)
}

/// `log p_k(x)` for one profile.
pub fn log_mixture_density(x: &DVector<f64>, profile: &DriverProfile, pool: &StatePool) -> Result<f64> {
    if x.len() != pool.dim() {
        return Err(Error::DimensionMismatch {
            expected: pool.dim(),
            got: x.len(),
        });
    }
    if profile.weights().len() != pool.len() {
        return Err(Error::DimensionMismatch {
            expected: pool.len(),
            got: profile.weights().len(),
        });
    }
    Ok(mix_log(profile.weights(), &pool.log_components(x)))
}

/// Hyperparameters stored with a model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelHyper {
    /// Projected dimension.
    pub m: usize,
    /// Number of shared states.
    pub q: usize,
    /// Window duration `T` (s).
    pub window: f64,
    /// Resampling overlap ratio used for training.
    pub overlap: f64,
    pub reaction_time: ReactionTimeConfig,
    pub seed: u64,
}

/// Posterior over drivers for one feature point.
#[derive(Debug, Clone, PartialEq)]
pub struct Posterior {
    /// `log p_k(x)`.
    pub log_density: Vec<f64>,
    /// `log P(k | x)`.
    pub log_prob: Vec<f64>,
    /// `P(k | x)`.
    pub prob: Vec<f64>,
    /// Set when every density underflowed and the uniform posterior was used.
    pub degenerate: bool,
}

impl Posterior {
    /// Softmax of per-driver log-densities (uniform prior over drivers).
    pub fn from_log_density(log_density: Vec<f64>) -> Self {
        let k = log_density.len();
        let lse = log_sum_exp(&log_density);
        if !lse.is_finite() {
            let lp = -(k as f64).ln();
            return Posterior {
                log_density,
                log_prob: vec![lp; k],
                prob: vec![1.0 / k as f64; k],
                degenerate: true,
            };
        }
        let log_prob: Vec<f64> = log_density.iter().map(|l| l - lse).collect();
        let prob = log_prob.iter().map(|l| l.exp()).collect();
        Posterior {
            log_density,
            log_prob,
            prob,
            degenerate: false,
        }
    }

    pub fn argmax(&self) -> usize {
        argmax(&self.log_prob)
    }
}

/// The full persisted bundle: standardizer, projection, states and profiles.
#[derive(Debug, Clone)]
pub struct GenerativeModel {
    standardizer: Standardizer,
    projection: ProjectionModel,
    pool: StatePool,
    driver_ids: Vec<String>,
    profiles: Vec<DriverProfile>,
    hyper: ModelHyper,
}

impl GenerativeModel {
    /// Assembles a model; profiles are ordered by driver id, which defines
    /// the driver index.
    pub fn new(
        standardizer: Standardizer,
        projection: ProjectionModel,
        states: Vec<DriverState>,
        profiles: Vec<(String, DriverProfile)>,
        hyper: ModelHyper,
    ) -> Result<Self> {
        let pool = StatePool::new(states)?;
        if pool.dim() != projection.dim() {
            return Err(Error::DimensionMismatch {
                expected: projection.dim(),
                got: pool.dim(),
            });
        }
        if hyper.m != projection.dim() || hyper.q != pool.len() {
            return Err(Error::invalid(format!(
                "hyperparameters (M={}, Q={}) disagree with parameters (M={}, Q={})",
                hyper.m,
                hyper.q,
                projection.dim(),
                pool.len()
            )));
        }
        if profiles.is_empty() {
            return Err(Error::invalid("model has no driver profiles"));
        }
        let mut profiles = profiles;
        profiles.sort_by(|a, b| a.0.cmp(&b.0));
        for w in profiles.windows(2) {
            if w[0].0 == w[1].0 {
                return Err(Error::DuplicateDriver(w[0].0.clone()));
            }
        }
        if let Some((id, p)) = profiles.iter().find(|(_, p)| p.weights().len() != pool.len()) {
            return Err(Error::invalid(format!(
                "profile `{id}` has {} weights, expected {}",
                p.weights().len(),
                pool.len()
            )));
        }
        let (driver_ids, profiles) = profiles.into_iter().unzip();
        Ok(GenerativeModel {
            standardizer,
            projection,
            pool,
            driver_ids,
            profiles,
            hyper,
        })
    }

    pub fn standardizer(&self) -> &Standardizer {
        &self.standardizer
    }

    pub fn projection(&self) -> &ProjectionModel {
        &self.projection
    }

    pub fn pool(&self) -> &StatePool {
        &self.pool
    }

    pub fn states(&self) -> &[DriverState] {
        self.pool.states()
    }

    pub fn driver_ids(&self) -> &[String] {
        &self.driver_ids
    }

    pub fn profiles(&self) -> &[DriverProfile] {
        &self.profiles
    }

    pub fn profile(&self, id: &str) -> Option<&DriverProfile> {
        self.driver_index(id).map(|k| &self.profiles[k])
    }

    pub fn driver_index(&self, id: &str) -> Option<usize> {
        self.driver_ids.binary_search_by(|d| d.as_str().cmp(id)).ok()
    }

    pub fn hyper(&self) -> &ModelHyper {
        &self.hyper
    }

    pub fn n_drivers(&self) -> usize {
        self.driver_ids.len()
    }

    /// Extract, standardize and project one window.
    pub fn featurize(&self, seq: &CarFollowingSequence) -> Result<DVector<f64>> {
        let raw = extract_features(seq, &self.hyper.reaction_time)?;
        self.projection.project(&self.standardizer.standardize(&raw))
    }

    /// `P(k | x)` for every driver.
    pub fn posterior(&self, x: &DVector<f64>) -> Result<Posterior> {
        if x.len() != self.pool.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.pool.dim(),
                got: x.len(),
            });
        }
        let lc = self.pool.log_components(x);
        let ld = self.profiles.iter().map(|p| mix_log(p.weights(), &lc)).collect();
        Ok(Posterior::from_log_density(ld))
    }

    /// Returns a copy with the given profiles replacing the current ones.
    pub fn with_profiles(&self, profiles: Vec<(String, DriverProfile)>) -> Result<Self> {
        GenerativeModel::new(
            self.standardizer.clone(),
            self.projection.clone(),
            self.pool.states().to_vec(),
            profiles,
            self.hyper.clone(),
        )
    }

    pub fn profile_pairs(&self) -> Vec<(String, DriverProfile)> {
        self.driver_ids.iter().cloned().zip(self.profiles.iter().cloned()).collect()
    }
}

/// Posterior over drivers for one projected feature point.
pub fn posterior_over_drivers(x: &DVector<f64>, model: &GenerativeModel) -> Result<Posterior> {
    let post = model.posterior(x)?;
    if post.degenerate {
        log::warn!("all driver densities underflowed; returning uniform posterior");
    }
    Ok(post)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Inference {
    pub driver_id: String,
    pub driver_index: usize,
    pub posterior: Posterior,
}

fn check_window(seq: &CarFollowingSequence, model: &GenerativeModel) -> Result<()> {
    let t = model.hyper().window;
    if (seq.duration() - t).abs() > 0.5 * seq.dt() + 1e-9 {
        return Err(Error::invalid(format!(
            "sequence `{}` lasts {:.3} s but the model expects {t} s windows",
            seq.source_id(),
            seq.duration()
        )));
    }
    Ok(())
}

/// Maximum-posterior driver for one window.
pub fn infer_single(seq: &CarFollowingSequence, model: &GenerativeModel) -> Result<Inference> {
    check_window(seq, model)?;
    let x = model.featurize(seq)?;
    let posterior = posterior_over_drivers(&x, model)?;
    let k = posterior.argmax();
    Ok(Inference {
        driver_id: model.driver_ids()[k].clone(),
        driver_index: k,
        posterior,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct MultiInference {
    pub driver_id: String,
    pub driver_index: usize,
    /// `Σ_n log P(k | S_n)` per driver.
    pub log_scores: Vec<f64>,
    pub n_sequences: usize,
}

/// Combines per-window log-posteriors under an independence assumption.
pub fn combine_log_posteriors<'a>(
    posteriors: impl IntoIterator<Item = &'a [f64]>,
    k: usize,
) -> Vec<f64> {
    let mut scores = vec![0.0; k];
    for lp in posteriors {
        for (s, l) in scores.iter_mut().zip(lp) {
            *s += l;
        }
    }
    scores
}

/// Maximum of the summed log-posteriors over independent windows.
pub fn infer_multi(seqs: &[CarFollowingSequence], model: &GenerativeModel) -> Result<MultiInference> {
    if seqs.is_empty() {
        return Err(Error::invalid("multi-sequence inference needs at least one sequence"));
    }
    let posts = par::map(seqs, |s| {
        check_window(s, model)?;
        model.posterior(&model.featurize(s)?)
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    let log_scores = combine_log_posteriors(posts.iter().map(|p| p.log_prob.as_slice()), model.n_drivers());
    let k = argmax(&log_scores);
    Ok(MultiInference {
        driver_id: model.driver_ids()[k].clone(),
        driver_index: k,
        log_scores,
        n_sequences: seqs.len(),
    })
}

/// Projected feature points with driver labels `0..n_drivers`.
#[derive(Debug, Clone)]
pub struct LabeledPoints {
    pub points: Vec<DVector<f64>>,
    pub labels: Vec<usize>,
    pub n_drivers: usize,
}

impl LabeledPoints {
    pub fn new(points: Vec<DVector<f64>>, labels: Vec<usize>, n_drivers: usize) -> Result<Self> {
        if points.len() != labels.len() {
            return Err(Error::DimensionMismatch {
                expected: points.len(),
                got: labels.len(),
            });
        }
        if let Some(l) = labels.iter().find(|&&l| l >= n_drivers) {
            return Err(Error::invalid(format!("label {l} out of range for {n_drivers} drivers")));
        }
        if let Some(p) = points.first() {
            let m = p.len();
            if points.iter().any(|x| x.len() != m) {
                return Err(Error::invalid("feature points have inconsistent dimensions"));
            }
        }
        Ok(LabeledPoints {
            points,
            labels,
            n_drivers,
        })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.points.first().map_or(0, |p| p.len())
    }

    pub fn counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.n_drivers];
        for &l in &self.labels {
            c[l] += 1;
        }
        c
    }
}

/// How EM starts.
#[derive(Debug, Clone)]
pub enum EmInit {
    /// Means drawn without replacement from the data, identity covariances,
    /// uniform profiles.
    Random,
    /// Continue from existing parameters.
    Warm {
        states: Vec<DriverState>,
        profiles: Vec<DriverProfile>,
    },
}

/// Result of [`em_fit`].
#[derive(Debug, Clone)]
pub struct EmFit {
    pub states: Vec<DriverState>,
    pub profiles: Vec<DriverProfile>,
    /// Training log-likelihood before the first and after every iteration
    /// (`n_iter + 1` entries).
    pub log_likelihood: Vec<f64>,
    /// Number of state reseeds performed.
    pub reseeds: usize,
}

struct EStep {
    /// Per-sample responsibilities over states.
    gamma: Vec<Vec<f64>>,
    log_likelihood: f64,
}

fn e_step(data: &LabeledPoints, pool: &StatePool, log_w: &[Vec<f64>]) -> Result<EStep> {
    let per_sample: Vec<(Vec<f64>, f64)> = par::map_range(data.len(), |n| {
        let lw = &log_w[data.labels[n]];
        let terms: Vec<f64> = pool
            .log_components(&data.points[n])
            .iter()
            .zip(lw)
            .map(|(l, w)| l + w)
            .collect();
        let lse = log_sum_exp(&terms);
        let g = terms.iter().map(|t| (t - lse).exp()).collect();
        (g, lse)
    });
    let mut ll = 0.0;
    let mut gamma = Vec::with_capacity(per_sample.len());
    for (n, (g, l)) in per_sample.into_iter().enumerate() {
        if !l.is_finite() {
            return Err(Error::NonFinite(format!("log-likelihood of sample {n}")));
        }
        ll += l;
        gamma.push(g);
    }
    Ok(EStep {
        gamma,
        log_likelihood: ll,
    })
}

/// Projects a symmetric matrix onto `{Σ : λ_min(Σ) ≥ floor}`.
fn floor_eigenvalues(sigma: DMatrix<f64>, floor: f64) -> DMatrix<f64> {
    let sym = (&sigma + sigma.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym.clone());
    if eig.eigenvalues.iter().all(|&l| l >= floor) {
        return sym;
    }
    let lambda = eig.eigenvalues.map(|l| l.max(floor));
    let v = &eig.eigenvectors;
    let out = v * DMatrix::from_diagonal(&lambda) * v.transpose();
    (&out + out.transpose()) * 0.5
}

struct MStep {
    states: Vec<DriverState>,
    weights: Vec<Vec<f64>>,
    reseeds: usize,
}

fn m_step<R: Rng + ?Sized>(data: &LabeledPoints, gamma: &[Vec<f64>], q: usize, rng: &mut R) -> MStep {
    let m = data.dim();
    let k = data.n_drivers;
    let n_k = data.counts();

    // M_kq and Σ_n γ x, accumulated in fixed chunks
    let idx: Vec<usize> = (0..data.len()).collect();
    let (mass_kq, sum_x) = par::map_reduce(
        &idx,
        |_, chunk| {
            let mut mk = vec![vec![0.0; q]; k];
            let mut sx = vec![DVector::<f64>::zeros(m); q];
            for &n in chunk {
                let row = &mut mk[data.labels[n]];
                for (qq, g) in gamma[n].iter().enumerate() {
                    row[qq] += g;
                    sx[qq].axpy(*g, &data.points[n], 1.0);
                }
            }
            (mk, sx)
        },
        (vec![vec![0.0; q]; k], vec![DVector::<f64>::zeros(m); q]),
        |(mut a, mut b), (c, d)| {
            for (ra, rc) in a.iter_mut().zip(&c) {
                for (x, y) in ra.iter_mut().zip(rc) {
                    *x += y;
                }
            }
            for (x, y) in b.iter_mut().zip(&d) {
                *x += y;
            }
            (a, b)
        },
    );
    let mass_q: Vec<f64> = (0..q).map(|qq| (0..k).map(|kk| mass_kq[kk][qq]).sum()).collect();
    let mu: Vec<DVector<f64>> = sum_x
        .iter()
        .zip(&mass_q)
        .map(|(s, &mq)| if mq > 0.0 { s / mq } else { s.clone() })
        .collect();

    let scatter = par::map_reduce(
        &idx,
        |_, chunk| {
            let mut sc = vec![DMatrix::<f64>::zeros(m, m); q];
            for &n in chunk {
                for (qq, g) in gamma[n].iter().enumerate() {
                    let d = &data.points[n] - &mu[qq];
                    sc[qq].ger(*g, &d, &d, 1.0);
                }
            }
            sc
        },
        vec![DMatrix::<f64>::zeros(m, m); q],
        |mut a, b| {
            for (x, y) in a.iter_mut().zip(&b) {
                *x += y;
            }
            a
        },
    );

    let mut weights: Vec<Vec<f64>> = (0..k)
        .map(|kk| mass_kq[kk].iter().map(|mk| mk / n_k[kk] as f64).collect())
        .collect();

    let mut reseeds = 0;
    let states = (0..q)
        .map(|qq| {
            if mass_q[qq] < EMPTY_STATE_MASS {
                reseeds += 1;
                let pick = rng.random_range(0..data.len());
                for w in weights.iter_mut() {
                    w[qq] = 1.0 / q as f64;
                    let s: f64 = w.iter().sum();
                    w.iter_mut().for_each(|x| *x /= s);
                }
                return DriverState::standard(m).with_mean(data.points[pick].clone());
            }
            let sigma = floor_eigenvalues(&scatter[qq] / mass_q[qq], COV_FLOOR);
            DriverState {
                mu: mu[qq].clone(),
                sigma,
            }
        })
        .collect();
    MStep {
        states,
        weights,
        reseeds,
    }
}

impl DriverState {
    fn with_mean(mut self, mu: DVector<f64>) -> Self {
        self.mu = mu;
        self
    }
}

/// Fits the shared states and per-driver profiles by EM.
///
/// The M-step pools means and covariances over all drivers and keeps one
/// weight vector per driver. Covariance eigenvalues are floored at
/// [`COV_FLOOR`], which is the exact constrained maximizer, so the training
/// log-likelihood is non-decreasing unless a state has to be reseeded.
pub fn em_fit<R: Rng + ?Sized>(
    data: &LabeledPoints,
    q: usize,
    init: EmInit,
    n_iter: usize,
    rng: &mut R,
) -> Result<EmFit> {
    if q == 0 {
        return Err(Error::invalid("number of states Q must be >= 1"));
    }
    if q > data.len() {
        return Err(Error::invalid(format!(
            "Q = {q} exceeds the number of training samples ({})",
            data.len()
        )));
    }
    if let Some(k) = data.counts().iter().position(|&c| c == 0) {
        return Err(Error::invalid(format!("driver index {k} has no training samples")));
    }
    let m = data.dim();
    let (mut states, mut weights) = match init {
        EmInit::Random => {
            let picks = sample(rng, data.len(), q);
            let states = picks
                .iter()
                .map(|i| DriverState::standard(m).with_mean(data.points[i].clone()))
                .collect();
            (states, vec![vec![1.0 / q as f64; q]; data.n_drivers])
        }
        EmInit::Warm { states, profiles } => {
            if states.len() != q || profiles.len() != data.n_drivers {
                return Err(Error::invalid("warm start does not match Q or the number of drivers"));
            }
            if states.iter().any(|s| s.dim() != m) {
                return Err(Error::DimensionMismatch {
                    expected: m,
                    got: states[0].dim(),
                });
            }
            (states, profiles.into_iter().map(|p| p.weights).collect())
        }
    };

    let mut trace = Vec::with_capacity(n_iter + 1);
    let mut reseeds = 0;
    for _ in 0..n_iter {
        let pool = StatePool::new(states)?;
        let log_w: Vec<Vec<f64>> = weights.iter().map(|w| w.iter().map(|x| x.ln()).collect()).collect();
        let e = e_step(data, &pool, &log_w)?;
        trace.push(e.log_likelihood);
        let ms = m_step(data, &e.gamma, q, rng);
        states = ms.states;
        weights = ms.weights;
        reseeds += ms.reseeds;
    }
    let pool = StatePool::new(states)?;
    let log_w: Vec<Vec<f64>> = weights.iter().map(|w| w.iter().map(|x| x.ln()).collect()).collect();
    trace.push(e_step(data, &pool, &log_w)?.log_likelihood);

    Ok(EmFit {
        states: pool.states,
        profiles: weights.into_iter().map(|weights| DriverProfile { weights }).collect(),
        log_likelihood: trace,
        reseeds,
    })
}

/// Iteration budget and stopping tolerance for weights-only EM.
#[derive(Debug, Clone, Copy)]
pub struct ProfileFitConfig {
    pub max_iter: usize,
    /// Stop once no weight moves by more than this.
    pub tol: f64,
}

impl Default for ProfileFitConfig {
    fn default() -> Self {
        ProfileFitConfig {
            max_iter: 20_000,
            tol: 1e-13,
        }
    }
}

/// EM over one driver's weights with the state pool frozen.
pub fn fit_profile(
    pool: &StatePool,
    points: &[DVector<f64>],
    cfg: ProfileFitConfig,
) -> Result<DriverProfile> {
    if points.is_empty() {
        return Err(Error::invalid("profile fit needs at least one feature vector"));
    }
    if let Some(p) = points.iter().find(|p| p.len() != pool.dim()) {
        return Err(Error::DimensionMismatch {
            expected: pool.dim(),
            got: p.len(),
        });
    }
    let q = pool.len();
    let log_comp: Vec<Vec<f64>> = par::map(points, |x| pool.log_components(x));
    let mut profile = DriverProfile::uniform(q);
    for _ in 0..cfg.max_iter {
        let lw = profile.log_weights();
        let mut mass = vec![0.0; q];
        for lc in &log_comp {
            let terms: Vec<f64> = lc.iter().zip(&lw).map(|(l, w)| l + w).collect();
            let lse = log_sum_exp(&terms);
            if !lse.is_finite() {
                return Err(Error::NonFinite("registration log-likelihood".into()));
            }
            for (m, t) in mass.iter_mut().zip(&terms) {
                *m += (t - lse).exp();
            }
        }
        let next: Vec<f64> = mass.iter().map(|m| m / points.len() as f64).collect();
        let delta = next
            .iter()
            .zip(profile.weights())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        profile = DriverProfile { weights: next };
        if delta < cfg.tol {
            break;
        }
    }
    Ok(profile)
}

/// Adds a new driver whose profile is estimated from its own projected
/// features only. States, projection and existing profiles are untouched.
pub fn register_driver(
    model: &GenerativeModel,
    driver_id: &str,
    features: &[DVector<f64>],
    cfg: ProfileFitConfig,
) -> Result<GenerativeModel> {
    if model.driver_index(driver_id).is_some() {
        return Err(Error::DuplicateDriver(driver_id.to_owned()));
    }
    let profile = fit_profile(model.pool(), features, cfg)?;
    let mut profiles = model.profile_pairs();
    profiles.push((driver_id.to_owned(), profile));
    model.with_profiles(profiles)
}

/// [`register_driver`] on raw windows.
pub fn register_sequences(
    model: &GenerativeModel,
    driver_id: &str,
    windows: &[CarFollowingSequence],
    cfg: ProfileFitConfig,
) -> Result<GenerativeModel> {
    let feats = par::map(windows, |s| model.featurize(s))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    register_driver(model, driver_id, &feats, cfg)
}
