//! Hand-crafted car-following features, standardization and the learnable
//! linear projection.
//!
//! The eight raw features of a window are, in order:
//!
//! | idx | feature                              | unit |
//! |-----|--------------------------------------|------|
//! | f1  | mean ego speed                        | m/s  |
//! | f2  | mean gap                              | m    |
//! | f3  | mean acceleration                     | m/s² |
//! | f4  | mean positive acceleration            | m/s² |
//! | f5  | mean negative acceleration            | m/s² |
//! | f6  | harmonic mean of time-to-collision    | s    |
//! | f7  | reaction time (best lag)              | s    |
//! | f8  | peak normalized cross-correlation     | –    |
//!
//! Time-to-collision is `h / ḣ` with `ḣ` the leader speed minus the ego
//! speed, and only frames with `ḣ > 0` (an opening gap) enter the harmonic
//! mean. Note this is the opposite of the usual collision-course sign.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::domain::CarFollowingSequence;
use crate::{par, Error, Result};

pub const N_FEATURES: usize = 8;

/// Cap applied to each TTC sample and used when no frame has `ḣ > 0`.
pub const TTC_CAP: f64 = 100.0;

/// Floor on standard deviations in [`Standardizer`].
pub const STD_FLOOR: f64 = 1e-8;

/// Series with a standard deviation below this are treated as constant.
const FLAT_STD: f64 = 1e-6;

pub const FEATURE_NAMES: [&str; N_FEATURES] = [
    "mean_speed",
    "mean_gap",
    "mean_accel",
    "mean_pos_accel",
    "mean_neg_accel",
    "harmonic_ttc",
    "reaction_time",
    "max_xcorr",
];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RawFeatureVector(pub [f64; N_FEATURES]);

impl RawFeatureVector {
    pub fn as_array(&self) -> &[f64; N_FEATURES] {
        &self.0
    }
    pub fn mean_speed(&self) -> f64 {
        self.0[0]
    }
    pub fn mean_gap(&self) -> f64 {
        self.0[1]
    }
    pub fn mean_accel(&self) -> f64 {
        self.0[2]
    }
    pub fn mean_pos_accel(&self) -> f64 {
        self.0[3]
    }
    pub fn mean_neg_accel(&self) -> f64 {
        self.0[4]
    }
    pub fn harmonic_ttc(&self) -> f64 {
        self.0[5]
    }
    pub fn reaction_time(&self) -> f64 {
        self.0[6]
    }
    pub fn max_xcorr(&self) -> f64 {
        self.0[7]
    }
}

/// Lag search range for the reaction-time features, in seconds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReactionTimeConfig {
    pub tau_min: f64,
    pub tau_max: f64,
}

impl Default for ReactionTimeConfig {
    fn default() -> Self {
        ReactionTimeConfig {
            tau_min: 0.0,
            tau_max: 5.0,
        }
    }
}

impl ReactionTimeConfig {
    pub fn check(&self) -> Result<()> {
        if !(self.tau_min >= 0.0 && self.tau_min < self.tau_max && self.tau_max.is_finite()) {
            return Err(Error::invalid(format!(
                "reaction-time bounds must satisfy 0 <= tau_min < tau_max, got [{}, {}]",
                self.tau_min, self.tau_max
            )));
        }
        Ok(())
    }

    /// Inclusive integer lag range at sampling period `dt`.
    pub fn lag_range(&self, dt: f64) -> (usize, usize) {
        let lo = (self.tau_min / dt - 1e-9).ceil().max(0.0) as usize;
        let hi = (self.tau_max / dt + 1e-9).floor() as usize;
        (lo, hi)
    }
}

fn mean(xs: impl Iterator<Item = f64>) -> Option<f64> {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    (n > 0).then(|| s / n as f64)
}

fn std_dev(xs: &[f64]) -> f64 {
    let m = xs.iter().sum::<f64>() / xs.len() as f64;
    (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / xs.len() as f64).sqrt()
}

/// Pearson correlation of two equally long slices; `None` if either is flat.
fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (da, db) = (a - mx, b - my);
        sxy += da * db;
        sxx += da * da;
        syy += db * db;
    }
    let flat = FLAT_STD * FLAT_STD * n;
    if sxx <= flat || syy <= flat {
        return None;
    }
    Some((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// Best lag (in frames) and peak correlation of `follower[t]` against
/// `leader[t − lag]`. Ties go to the smallest lag. Returns `(0, 0.0)` when
/// either series is flat or no lag has at least two overlapping samples.
pub fn lagged_xcorr(follower: &[f64], leader: &[f64], lags: (usize, usize)) -> (usize, f64) {
    debug_assert_eq!(follower.len(), leader.len());
    let n = follower.len();
    if n < 2 || std_dev(follower) < FLAT_STD || std_dev(leader) < FLAT_STD {
        return (0, 0.0);
    }
    let mut best: Option<(usize, f64)> = None;
    for lag in lags.0..=lags.1.min(n.saturating_sub(2)) {
        if let Some(rho) = pearson(&follower[lag..], &leader[..n - lag]) {
            if best.is_none_or(|(_, b)| rho > b) {
                best = Some((lag, rho));
            }
        }
    }
    best.unwrap_or((0, 0.0))
}

/// Computes the eight raw features of one window.
pub fn extract_features(
    seq: &CarFollowingSequence,
    rt: &ReactionTimeConfig,
) -> Result<RawFeatureVector> {
    let frames = seq.frames();
    if frames.len() < 2 {
        return Err(Error::invalid(format!(
            "sequence `{}` needs at least 2 frames for feature extraction",
            seq.source_id()
        )));
    }
    rt.check()?;

    let f1 = mean(frames.iter().map(|f| f.v)).unwrap();
    let f2 = mean(frames.iter().map(|f| f.h)).unwrap();
    let f3 = mean(frames.iter().map(|f| f.a)).unwrap();
    let f4 = mean(frames.iter().filter(|f| f.a > 0.0).map(|f| f.a)).unwrap_or(0.0);
    let f5 = mean(frames.iter().filter(|f| f.a < 0.0).map(|f| f.a)).unwrap_or(0.0);

    let (n_pos, inv_sum) = frames
        .iter()
        .filter(|f| f.hdot > 0.0)
        .fold((0usize, 0.0), |(n, s), f| {
            let ttc = (f.h / f.hdot).min(TTC_CAP);
            (n + 1, s + 1.0 / ttc)
        });
    let f6 = if n_pos == 0 { TTC_CAP } else { n_pos as f64 / inv_sum };

    let ego: Vec<f64> = frames.iter().map(|f| f.v).collect();
    let lead: Vec<f64> = frames.iter().map(|f| f.leader_speed()).collect();
    let (lag, rho) = lagged_xcorr(&ego, &lead, rt.lag_range(seq.dt()));
    let f7 = lag as f64 * seq.dt();
    let f8 = rho;

    Ok(RawFeatureVector([f1, f2, f3, f4, f5, f6, f7, f8]))
}

/// Extracts features for many windows, preserving order.
pub fn extract_all(
    seqs: &[CarFollowingSequence],
    rt: &ReactionTimeConfig,
) -> Result<Vec<RawFeatureVector>> {
    par::map(seqs, |s| extract_features(s, rt)).into_iter().collect()
}

/// Per-dimension mean and population standard deviation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: [f64; N_FEATURES],
    pub std: [f64; N_FEATURES],
}

impl Standardizer {
    /// Fits on a training set; the standard deviation uses the population
    /// (divide by `n`) convention and is floored at [`STD_FLOOR`].
    pub fn fit(features: &[RawFeatureVector]) -> Result<Self> {
        if features.len() < 2 {
            return Err(Error::invalid(format!(
                "standardizer needs at least 2 feature vectors, got {}",
                features.len()
            )));
        }
        let n = features.len() as f64;
        let mut mean = [0.0; N_FEATURES];
        for f in features {
            for (m, x) in mean.iter_mut().zip(f.0) {
                *m += x;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut std = [0.0; N_FEATURES];
        for f in features {
            for j in 0..N_FEATURES {
                std[j] += (f.0[j] - mean[j]).powi(2);
            }
        }
        std.iter_mut().for_each(|s| *s = (*s / n).sqrt().max(STD_FLOOR));
        Ok(Standardizer { mean, std })
    }

    pub fn standardize(&self, x: &RawFeatureVector) -> [f64; N_FEATURES] {
        std::array::from_fn(|j| (x.0[j] - self.mean[j]) / self.std[j])
    }

    pub fn destandardize(&self, z: &[f64; N_FEATURES]) -> RawFeatureVector {
        RawFeatureVector(std::array::from_fn(|j| z[j] * self.std[j] + self.mean[j]))
    }
}

/// The `M × 8` projection matrix `A`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionModel {
    a: DMatrix<f64>,
}

impl ProjectionModel {
    pub fn new(a: DMatrix<f64>) -> Result<Self> {
        if a.ncols() != N_FEATURES {
            return Err(Error::DimensionMismatch {
                expected: N_FEATURES,
                got: a.ncols(),
            });
        }
        if a.nrows() == 0 || a.nrows() > N_FEATURES {
            return Err(Error::invalid(format!(
                "projection dimension M = {} must be in 1..=8",
                a.nrows()
            )));
        }
        if a.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("projection matrix".into()));
        }
        Ok(ProjectionModel { a })
    }

    pub fn from_row_major(m: usize, data: &[f64]) -> Result<Self> {
        if data.len() != m * N_FEATURES {
            return Err(Error::DimensionMismatch {
                expected: m * N_FEATURES,
                got: data.len(),
            });
        }
        Self::new(DMatrix::from_row_slice(m, N_FEATURES, data))
    }

    /// `[I_M | 0]`.
    pub fn selector(m: usize) -> Result<Self> {
        Self::new(DMatrix::from_fn(m, N_FEATURES, |i, j| if i == j { 1.0 } else { 0.0 }))
    }

    /// Gaussian rows, orthonormalized with Gram–Schmidt.
    pub fn random_orthonormal<R: Rng + ?Sized>(m: usize, rng: &mut R) -> Result<Self> {
        if m == 0 || m > N_FEATURES {
            return Err(Error::invalid(format!("projection dimension M = {m} must be in 1..=8")));
        }
        let mut rows: Vec<DVector<f64>> = Vec::with_capacity(m);
        while rows.len() < m {
            let mut r = DVector::from_fn(N_FEATURES, |_, _| rng.sample::<f64, _>(StandardNormal));
            for q in &rows {
                let d = r.dot(q);
                r.axpy(-d, q, 1.0);
            }
            let n = r.norm();
            if n > 1e-6 {
                rows.push(r / n);
            }
        }
        Self::new(DMatrix::from_fn(m, N_FEATURES, |i, j| rows[i][j]))
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.a
    }

    pub fn dim(&self) -> usize {
        self.a.nrows()
    }

    pub fn to_row_major(&self) -> Vec<f64> {
        (0..self.a.nrows())
            .flat_map(|i| (0..N_FEATURES).map(move |j| (i, j)))
            .map(|(i, j)| self.a[(i, j)])
            .collect()
    }

    /// `x = A·x̃` for a standardized feature vector.
    pub fn project(&self, x_std: &[f64]) -> Result<DVector<f64>> {
        if x_std.len() != N_FEATURES {
            return Err(Error::DimensionMismatch {
                expected: N_FEATURES,
                got: x_std.len(),
            });
        }
        Ok(&self.a * DVector::from_column_slice(x_std))
    }

    /// Scales every row to unit Euclidean length. Zero rows are left as is.
    pub fn normalize_rows(&mut self) {
        for mut row in self.a.row_iter_mut() {
            let n = row.norm();
            if n > 0.0 {
                row /= n;
            }
        }
    }

    /// `A − step·grad`.
    pub fn stepped(&self, grad: &DMatrix<f64>, step: f64) -> Result<Self> {
        if grad.shape() != self.a.shape() {
            return Err(Error::DimensionMismatch {
                expected: self.a.len(),
                got: grad.len(),
            });
        }
        Self::new(&self.a - grad * step)
    }

    /// Contribution of each raw feature, `C(f_j) = Σ_i a_ij²`.
    pub fn feature_contributions(&self) -> [f64; N_FEATURES] {
        std::array::from_fn(|j| self.a.column(j).iter().map(|x| x * x).sum())
    }
}
