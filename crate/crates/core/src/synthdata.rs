//! Deterministic synthetic car-following corpora.
//!
//! Each sequence simulates one leader with a piecewise-constant target
//! speed and one follower driven by an intelligent-driver-model controller
//! that perceives the scene with a reaction lag. Followers switch between
//! parameter regimes according to a Markov chain evaluated at a fixed
//! interval, which gives every driver several behavioral modes.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::domain::{CarFollowingSequence, Dataset, Frame, Split, ValidationCriteria, DEFAULT_DT};
use crate::{par, Error, Result};

/// Follower controller parameters for one regime.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegimeParams {
    /// Desired time headway (s).
    pub time_headway: f64,
    /// Maximum acceleration (m/s²).
    pub max_accel: f64,
    /// Comfortable deceleration (m/s², positive).
    pub comfort_decel: f64,
    /// Perception delay (s).
    pub reaction_lag: f64,
    /// Standstill gap (m).
    #[serde(default = "default_min_gap")]
    pub min_gap: f64,
    /// Free-road desired speed (m/s).
    #[serde(default = "default_desired_speed")]
    pub desired_speed: f64,
}

fn default_min_gap() -> f64 {
    2.0
}

fn default_desired_speed() -> f64 {
    33.0
}

impl RegimeParams {
    fn check(&self) -> Result<()> {
        let vals = [
            self.time_headway,
            self.max_accel,
            self.comfort_decel,
            self.min_gap,
            self.desired_speed,
        ];
        if vals.iter().any(|v| !(v.is_finite() && *v > 0.0)) || !(self.reaction_lag >= 0.0) {
            return Err(Error::invalid(format!("regime parameters must be positive: {self:?}")));
        }
        Ok(())
    }

    /// Steady-state gap behind a leader moving at `v`.
    pub fn equilibrium_gap(&self, v: f64) -> f64 {
        let free = 1.0 - (v / self.desired_speed).powi(4);
        (self.min_gap + v * self.time_headway) / free.max(1e-6).sqrt()
    }

    /// Intelligent-driver-model acceleration for gap `s`, own speed `v` and
    /// approach rate `dv = v − v_leader`.
    pub fn idm_accel(&self, s: f64, v: f64, dv: f64) -> f64 {
        let s_star = self.min_gap
            + (v * self.time_headway + v * dv / (2.0 * (self.max_accel * self.comfort_decel).sqrt())).max(0.0);
        self.max_accel * (1.0 - (v / self.desired_speed).powi(4) - (s_star / s.max(0.1)).powi(2))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    /// Stationary std of the follower's acceleration noise (m/s²).
    pub accel_std: f64,
    /// Correlation time of that noise (s).
    pub accel_tau: f64,
}

impl Default for NoiseSpec {
    fn default() -> Self {
        NoiseSpec {
            accel_std: 0.1,
            accel_tau: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DriverSpec {
    pub driver_id: String,
    pub regimes: Vec<RegimeParams>,
    /// Row-stochastic regime transition matrix, applied every
    /// `regime_interval` seconds.
    pub transition: Vec<Vec<f64>>,
    #[serde(default = "default_regime_interval")]
    pub regime_interval: f64,
    #[serde(default)]
    pub noise: NoiseSpec,
}

fn default_regime_interval() -> f64 {
    10.0
}

impl DriverSpec {
    /// A single-regime driver.
    pub fn single(driver_id: impl Into<String>, regime: RegimeParams, noise: NoiseSpec) -> Self {
        DriverSpec {
            driver_id: driver_id.into(),
            regimes: vec![regime],
            transition: vec![vec![1.0]],
            regime_interval: default_regime_interval(),
            noise,
        }
    }

    pub fn check(&self) -> Result<()> {
        if self.regimes.is_empty() {
            return Err(Error::invalid(format!("driver `{}` has no regimes", self.driver_id)));
        }
        for r in &self.regimes {
            r.check()?;
        }
        let q = self.regimes.len();
        if self.transition.len() != q || self.transition.iter().any(|row| row.len() != q) {
            return Err(Error::invalid(format!(
                "driver `{}`: transition matrix must be {q}×{q}",
                self.driver_id
            )));
        }
        for row in &self.transition {
            let s: f64 = row.iter().sum();
            if row.iter().any(|p| !(*p >= 0.0)) || (s - 1.0).abs() > 1e-9 {
                return Err(Error::invalid(format!(
                    "driver `{}`: transition rows must lie on the simplex",
                    self.driver_id
                )));
            }
        }
        if !(self.regime_interval > 0.0) || self.noise.accel_std < 0.0 || !(self.noise.accel_tau > 0.0) {
            return Err(Error::invalid(format!("driver `{}`: bad noise or interval", self.driver_id)));
        }
        Ok(())
    }

    /// Stationary distribution of the regime chain (power iteration).
    pub fn stationary_distribution(&self) -> Vec<f64> {
        let q = self.regimes.len();
        let mut p = vec![1.0 / q as f64; q];
        for _ in 0..10_000 {
            let mut next = vec![0.0; q];
            for (i, pi) in p.iter().enumerate() {
                for (j, t) in self.transition[i].iter().enumerate() {
                    next[j] += pi * t;
                }
            }
            let diff: f64 = next.iter().zip(&p).map(|(a, b)| (a - b).abs()).sum();
            p = next;
            if diff < 1e-15 {
                break;
            }
        }
        p
    }

    fn draw(&self, from: usize, rng: &mut impl Rng) -> usize {
        draw_index(&self.transition[from], rng)
    }

    /// Regime sequence of `n` consecutive Markov draws, starting from the
    /// stationary distribution.
    pub fn simulate_regimes(&self, n: usize, rng: &mut impl Rng) -> Vec<usize> {
        let mut cur = draw_index(&self.stationary_distribution(), rng);
        (0..n)
            .map(|_| {
                let r = cur;
                cur = self.draw(cur, rng);
                r
            })
            .collect()
    }
}

fn draw_index(p: &[f64], rng: &mut impl Rng) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, pi) in p.iter().enumerate() {
        acc += pi;
        if u < acc {
            return i;
        }
    }
    p.len() - 1
}

/// Leader speed profile: targets drawn uniformly, held for a random time,
/// approached with bounded acceleration, plus a small random perturbation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LeaderProfile {
    pub speed_min: f64,
    pub speed_max: f64,
    pub hold_min: f64,
    pub hold_max: f64,
    /// Largest acceleration magnitude while ramping (m/s²).
    pub ramp_accel: f64,
    /// Std of the leader's acceleration perturbation (m/s²).
    pub perturbation_std: f64,
}

impl Default for LeaderProfile {
    fn default() -> Self {
        LeaderProfile {
            speed_min: 8.0,
            speed_max: 22.0,
            hold_min: 8.0,
            hold_max: 30.0,
            ramp_accel: 1.0,
            perturbation_std: 0.2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSpec {
    pub leader: LeaderProfile,
    /// Raw sequence durations are uniform in `[duration_min, duration_max]`.
    pub duration_min: f64,
    pub duration_max: f64,
    pub dt: f64,
    /// Simulated time discarded before recording (s).
    pub warmup: f64,
    pub seed: u64,
}

impl Default for ScenarioSpec {
    fn default() -> Self {
        ScenarioSpec {
            leader: LeaderProfile::default(),
            duration_min: 30.0,
            duration_max: 180.0,
            dt: DEFAULT_DT,
            warmup: 20.0,
            seed: 0,
        }
    }
}

impl ScenarioSpec {
    pub fn check(&self) -> Result<()> {
        let l = &self.leader;
        if !(0.0 <= l.speed_min && l.speed_min <= l.speed_max) {
            return Err(Error::invalid("leader speeds must satisfy 0 <= speed_min <= speed_max"));
        }
        if !(0.0 < l.hold_min && l.hold_min <= l.hold_max) || !(l.ramp_accel > 0.0) || l.perturbation_std < 0.0 {
            return Err(Error::invalid("bad leader hold times, ramp or perturbation"));
        }
        if !(self.dt > 0.0) || !(0.0 < self.duration_min && self.duration_min <= self.duration_max) || self.warmup < 0.0 {
            return Err(Error::invalid("bad scenario timing"));
        }
        Ok(())
    }
}

/// Everything needed to generate a corpus; this is the on-disk spec file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusSpec {
    pub scenario: ScenarioSpec,
    pub drivers: Vec<DriverSpec>,
    pub sequences_per_driver: usize,
    /// Thresholds every generated sequence must pass.
    #[serde(default = "generator_criteria")]
    pub validation: ValidationCriteria,
    #[serde(default = "default_retries")]
    pub max_retries: usize,
}

fn default_retries() -> usize {
    20
}

/// Validation thresholds matched to the generator (gaps can exceed 40 m at
/// long headways).
pub fn generator_criteria() -> ValidationCriteria {
    ValidationCriteria {
        max_gap: 120.0,
        min_duration: 25.0,
    }
}

fn regime(time_headway: f64, max_accel: f64, comfort_decel: f64, reaction_lag: f64, min_gap: f64) -> RegimeParams {
    RegimeParams {
        time_headway,
        max_accel,
        comfort_decel,
        reaction_lag,
        min_gap,
        desired_speed: default_desired_speed(),
    }
}

impl CorpusSpec {
    pub fn check(&self) -> Result<()> {
        self.scenario.check()?;
        if self.drivers.is_empty() {
            return Err(Error::invalid("corpus spec has no drivers"));
        }
        let mut ids: Vec<&str> = self.drivers.iter().map(|d| d.driver_id.as_str()).collect();
        ids.sort();
        if ids.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::invalid("driver ids must be unique"));
        }
        self.drivers.iter().try_for_each(DriverSpec::check)
    }

    /// Four well-separated single-regime drivers.
    pub fn easy4(seed: u64) -> Self {
        let noise = NoiseSpec::default();
        let drivers = vec![
            DriverSpec::single("D1", regime(0.8, 2.0, 3.0, 0.4, 2.0), noise.clone()),
            DriverSpec::single("D2", regime(1.3, 1.2, 1.8, 1.0, 3.0), noise.clone()),
            DriverSpec::single("D3", regime(1.9, 0.8, 1.2, 1.6, 4.0), noise.clone()),
            DriverSpec::single("D4", regime(2.6, 1.6, 2.5, 0.7, 2.5), noise),
        ];
        CorpusSpec {
            scenario: ScenarioSpec {
                seed,
                ..ScenarioSpec::default()
            },
            drivers,
            sequences_per_driver: 100,
            validation: generator_criteria(),
            max_retries: default_retries(),
        }
    }

    /// Eight drivers with overlapping parameters and two regimes each.
    pub fn hard8(seed: u64) -> Self {
        let base = [
            (0.9, 1.6, 2.2, 0.5, 2.0),
            (1.1, 1.0, 1.6, 0.9, 3.0),
            (1.3, 1.4, 2.0, 1.2, 2.5),
            (1.5, 0.9, 1.4, 0.7, 3.5),
            (1.7, 1.2, 1.8, 1.4, 2.0),
            (1.9, 1.5, 2.4, 1.0, 3.0),
            (2.1, 0.8, 1.2, 0.6, 4.0),
            (2.3, 1.1, 1.5, 1.5, 2.5),
        ];
        let drivers = base
            .iter()
            .enumerate()
            .map(|(i, &(th, a, b, lag, s0))| {
                let calm = regime(th * 1.15, a * 0.8, b * 0.8, lag * 1.2, s0);
                let brisk = regime(th * 0.85, a * 1.25, b * 1.25, lag * 0.8, s0);
                let stay = 0.6 + 0.04 * i as f64;
                DriverSpec {
                    driver_id: format!("D{}", i + 1),
                    regimes: vec![calm, brisk],
                    transition: vec![vec![stay, 1.0 - stay], vec![1.0 - stay, stay]],
                    regime_interval: 10.0,
                    noise: NoiseSpec {
                        accel_std: 0.15,
                        accel_tau: 1.0,
                    },
                }
            })
            .collect();
        CorpusSpec {
            scenario: ScenarioSpec {
                seed,
                ..ScenarioSpec::default()
            },
            drivers,
            sequences_per_driver: 60,
            validation: generator_criteria(),
            max_retries: default_retries(),
        }
    }

    pub fn preset(name: &str, seed: u64) -> Option<Self> {
        match name {
            "easy4" => Some(Self::easy4(seed)),
            "hard8" => Some(Self::hard8(seed)),
            _ => None,
        }
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed for one (driver, sequence, attempt) triple.
fn derive_seed(master: u64, driver: usize, seq: usize, attempt: usize) -> u64 {
    let mut s = splitmix64(master);
    for part in [driver as u64, seq as u64, attempt as u64] {
        s = splitmix64(s ^ part);
    }
    s
}

/// Discrete-time Ornstein–Uhlenbeck process with stationary std `std`.
struct Ou {
    x: f64,
    decay: f64,
    kick: f64,
}

impl Ou {
    fn new(std: f64, tau: f64, dt: f64) -> Self {
        let decay = (-dt / tau).exp();
        Ou {
            x: 0.0,
            decay,
            kick: std * (1.0 - decay * decay).sqrt(),
        }
    }

    fn step(&mut self, rng: &mut impl Rng, normal: &Normal<f64>) -> f64 {
        self.x = self.decay * self.x + self.kick * normal.sample(rng);
        self.x
    }
}

/// Hard braking limit of the follower (m/s²).
const MAX_BRAKE: f64 = 9.0;
/// Gap at or below which a run counts as contact (m).
const CONTACT_GAP: f64 = 0.5;

/// Simulates one leader–follower pair. `None` if the follower got closer
/// than [`CONTACT_GAP`].
pub fn simulate_sequence(
    driver: &DriverSpec,
    scenario: &ScenarioSpec,
    seed: u64,
    source_id: &str,
) -> Result<Option<CarFollowingSequence>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let dt = scenario.dt;
    let lp = &scenario.leader;

    let duration = if scenario.duration_max > scenario.duration_min {
        rng.random_range(scenario.duration_min..=scenario.duration_max)
    } else {
        scenario.duration_min
    };
    let n_record = (duration / dt).round() as usize;
    let n_warm = (scenario.warmup / dt).round() as usize;
    let regime_steps = ((driver.regime_interval / dt).round() as usize).max(1);

    let draw_target = |rng: &mut ChaCha8Rng| {
        if lp.speed_max > lp.speed_min {
            rng.random_range(lp.speed_min..=lp.speed_max)
        } else {
            lp.speed_min
        }
    };
    let draw_hold = |rng: &mut ChaCha8Rng| {
        let h = if lp.hold_max > lp.hold_min {
            rng.random_range(lp.hold_min..=lp.hold_max)
        } else {
            lp.hold_min
        };
        ((h / dt).round() as usize).max(1)
    };

    let mut regime = draw_index(&driver.stationary_distribution(), &mut rng);
    let mut v_lead = draw_target(&mut rng);
    let mut target = v_lead;
    let mut hold = draw_hold(&mut rng);
    let mut v = v_lead;
    let mut gap = driver.regimes[regime].equilibrium_gap(v);
    let mut lead_noise = Ou::new(lp.perturbation_std, 2.0, dt);
    let mut accel_noise = Ou::new(driver.noise.accel_std, driver.noise.accel_tau, dt);

    // perception history: (gap, own speed, leader speed)
    let mut history: Vec<(f64, f64, f64)> = Vec::with_capacity(n_warm + n_record + 1);
    let mut frames = Vec::with_capacity(n_record);

    for step in 0..n_warm + n_record {
        history.push((gap, v, v_lead));
        if step > 0 && step % regime_steps == 0 {
            regime = driver.draw(regime, &mut rng);
        }
        let p = &driver.regimes[regime];

        // leader
        hold -= 1;
        if hold == 0 {
            target = draw_target(&mut rng);
            hold = draw_hold(&mut rng);
        }
        let ramp = (0.5 * (target - v_lead)).clamp(-lp.ramp_accel, lp.ramp_accel);
        let a_lead = ramp + lead_noise.step(&mut rng, &normal);
        let v_lead_next = (v_lead + a_lead * dt).max(0.0);

        // follower reacts to the scene `reaction_lag` seconds ago
        let lag = (p.reaction_lag / dt).round() as usize;
        let (s_p, v_p, vl_p) = history[history.len() - 1 - lag.min(history.len() - 1)];
        let a_cmd = p.idm_accel(s_p, v_p, v_p - vl_p) + accel_noise.step(&mut rng, &normal);
        let a_cmd = a_cmd.clamp(-MAX_BRAKE, p.max_accel * 1.5);
        let v_next = (v + a_cmd * dt).max(0.0);
        let a_eff = (v_next - v) / dt;

        if step >= n_warm {
            frames.push(Frame::new(v, a_eff, gap, v_lead - v));
        }
        // semi-implicit Euler on positions
        gap += (v_lead_next - v_next) * dt;
        v = v_next;
        v_lead = v_lead_next;
        if gap <= CONTACT_GAP || !gap.is_finite() {
            return Ok(None);
        }
    }
    CarFollowingSequence::new(frames, dt, Some(driver.driver_id.clone()), source_id).map(Some)
}

/// Generates `sequences_per_driver` validated sequences for every driver.
///
/// The corpus is a pure function of the spec: every sequence has its own
/// seed derived from the scenario seed, driver index, sequence index and
/// retry attempt.
pub fn generate_corpus(spec: &CorpusSpec) -> Result<Dataset> {
    spec.check()?;
    let jobs: Vec<(usize, usize)> = (0..spec.drivers.len())
        .flat_map(|d| (0..spec.sequences_per_driver).map(move |s| (d, s)))
        .collect();
    let seqs = par::map(&jobs, |&(d, s)| {
        let driver = &spec.drivers[d];
        let source = format!("{}_{s:04}", driver.driver_id);
        for attempt in 0..=spec.max_retries {
            let seed = derive_seed(spec.scenario.seed, d, s, attempt);
            if let Some(seq) = simulate_sequence(driver, &spec.scenario, seed, &source)? {
                if crate::domain::validate_car_following(&seq, &spec.validation).is_ok() {
                    return Ok(seq);
                }
            }
        }
        Err(Error::invalid(format!(
            "driver `{}`: no feasible sequence after {} retries",
            driver.driver_id, spec.max_retries
        )))
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    Dataset::labeled(seqs, Split::All)
}

/// Per-driver stratified split; `round(fraction · N_k)` sequences of each
/// driver go to the training side.
pub fn split_dataset(ds: &Dataset, train_fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    if !(0.0..=1.0).contains(&train_fraction) {
        return Err(Error::invalid(format!("train fraction {train_fraction} must lie in [0, 1]")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut is_train = vec![false; ds.len()];
    for id in ds.driver_ids() {
        let mut idx: Vec<usize> = ds
            .sequences
            .iter()
            .enumerate()
            .filter(|(_, s)| s.driver_id() == Some(id.as_str()))
            .map(|(i, _)| i)
            .collect();
        idx.shuffle(&mut rng);
        let n_train = (train_fraction * idx.len() as f64).round() as usize;
        for &i in &idx[..n_train] {
            is_train[i] = true;
        }
    }
    let pick = |want: bool, split: Split| Dataset {
        sequences: ds
            .sequences
            .iter()
            .zip(&is_train)
            .filter(|(_, &t)| t == want)
            .map(|(s, _)| s.clone())
            .collect(),
        split,
    };
    Ok((pick(true, Split::Train), pick(false, Split::Test)))
}
