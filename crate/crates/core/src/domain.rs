//! Car-following sequences, validation and fixed-length resampling.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Default sampling period (10 Hz).
pub const DEFAULT_DT: f64 = 0.1;

/// One sample of a leader–follower pair.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Frame {
    /// Ego longitudinal speed (m/s).
    pub v: f64,
    /// Ego longitudinal acceleration (m/s²).
    pub a: f64,
    /// Longitudinal distance to the leader (m).
    pub h: f64,
    /// Leader speed minus ego speed (m/s). Positive means the gap is opening.
    pub hdot: f64,
}

impl Frame {
    pub fn new(v: f64, a: f64, h: f64, hdot: f64) -> Self {
        Frame { v, a, h, hdot }
    }

    pub fn leader_speed(&self) -> f64 {
        self.v + self.hdot
    }

    fn check(&self, idx: usize) -> Result<()> {
        if ![self.v, self.a, self.h, self.hdot].iter().all(|x| x.is_finite()) {
            return Err(Error::invalid(format!("frame {idx}: non-finite field")));
        }
        if self.h <= 0.0 {
            return Err(Error::invalid(format!("frame {idx}: gap h = {} must be > 0", self.h)));
        }
        Ok(())
    }
}

/// A fixed-rate time series of [`Frame`]s.
#[derive(Debug, Clone, PartialEq)]
pub struct CarFollowingSequence {
    frames: Vec<Frame>,
    dt: f64,
    driver_id: Option<String>,
    source_id: String,
}

impl CarFollowingSequence {
    pub fn new(
        frames: Vec<Frame>,
        dt: f64,
        driver_id: Option<String>,
        source_id: impl Into<String>,
    ) -> Result<Self> {
        if frames.is_empty() {
            return Err(Error::invalid("sequence has no frames"));
        }
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(Error::invalid(format!("sampling period dt = {dt} must be > 0")));
        }
        for (i, f) in frames.iter().enumerate() {
            f.check(i)?;
        }
        Ok(CarFollowingSequence {
            frames,
            dt,
            driver_id,
            source_id: source_id.into(),
        })
    }

    pub fn frames(&self) -> &[Frame] {
        &self.frames
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    /// `len · dt` seconds.
    pub fn duration(&self) -> f64 {
        self.frames.len() as f64 * self.dt
    }

    pub fn driver_id(&self) -> Option<&str> {
        self.driver_id.as_deref()
    }

    pub fn source_id(&self) -> &str {
        &self.source_id
    }

    pub fn with_driver_id(mut self, id: impl Into<String>) -> Self {
        self.driver_id = Some(id.into());
        self
    }
}

/// Thresholds used to decide whether a raw segment is a car-following event.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ValidationCriteria {
    /// Largest admissible gap to the leader (m).
    pub max_gap: f64,
    /// Shortest admissible duration (s).
    pub min_duration: f64,
}

impl Default for ValidationCriteria {
    fn default() -> Self {
        ValidationCriteria {
            max_gap: 40.0,
            min_duration: 25.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Rejection {
    TooShort { duration: f64, min_duration: f64 },
    GapExceeded { frame: usize, gap: f64, max_gap: f64 },
}

impl std::fmt::Display for Rejection {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Rejection::TooShort { duration, min_duration } => {
                write!(f, "duration {duration:.2} s shorter than {min_duration} s")
            }
            Rejection::GapExceeded { frame, gap, max_gap } => {
                write!(f, "gap {gap:.2} m at frame {frame} exceeds {max_gap} m")
            }
        }
    }
}

/// Checks the car-following extraction criteria.
///
/// A sequence carries a single `source_id`, which stands for "the leader did
/// not change". Duration is checked before the gap; the first violation wins.
pub fn validate_car_following(
    seq: &CarFollowingSequence,
    criteria: &ValidationCriteria,
) -> std::result::Result<(), Rejection> {
    // small slack so that e.g. 250 frames at 0.1 s count as 25 s
    let duration = seq.duration();
    if duration + 1e-9 < criteria.min_duration {
        return Err(Rejection::TooShort {
            duration,
            min_duration: criteria.min_duration,
        });
    }
    if let Some((frame, f)) = seq
        .frames()
        .iter()
        .enumerate()
        .find(|(_, f)| f.h > criteria.max_gap)
    {
        return Err(Rejection::GapExceeded {
            frame,
            gap: f.h,
            max_gap: criteria.max_gap,
        });
    }
    Ok(())
}

/// Window duration `T` and overlap ratio `r`; windows start every `T·(1−r)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ResampleConfig {
    pub window: f64,
    pub overlap: f64,
}

impl ResampleConfig {
    pub fn new(window: f64, overlap: f64) -> Result<Self> {
        let cfg = ResampleConfig { window, overlap };
        cfg.check()?;
        Ok(cfg)
    }

    pub fn check(&self) -> Result<()> {
        if !(self.window > 0.0 && self.window.is_finite()) {
            return Err(Error::invalid(format!("window T = {} must be > 0", self.window)));
        }
        if !(0.0..1.0).contains(&self.overlap) {
            return Err(Error::invalid(format!(
                "overlap ratio r = {} must lie in [0, 1)",
                self.overlap
            )));
        }
        Ok(())
    }

    /// Start-to-start interval `T' = T·(1−r)`.
    pub fn stride(&self) -> f64 {
        self.window * (1.0 - self.overlap)
    }

    /// Frames per window at sampling period `dt`.
    pub fn window_frames(&self, dt: f64) -> usize {
        (self.window / dt).round() as usize
    }

    /// `floor((L − T)/T') + 1` for `L ≥ T`, else 0.
    pub fn window_count(&self, duration: f64) -> usize {
        if duration + 1e-9 < self.window {
            return 0;
        }
        ((duration - self.window) / self.stride() + 1e-9).floor() as usize + 1
    }
}

/// Cuts `seq` into windows of exactly `T` seconds starting at `n·T'`.
///
/// The start grid is anchored at the first frame and the tail remainder is
/// dropped. Sequences shorter than `T` yield no windows.
pub fn resample(seq: &CarFollowingSequence, cfg: &ResampleConfig) -> Vec<CarFollowingSequence> {
    let dt = seq.dt();
    let len = seq.len();
    let wlen = cfg.window_frames(dt);
    if wlen == 0 || wlen > len {
        return Vec::new();
    }
    let count = cfg.window_count(seq.duration());
    let stride_frames = cfg.stride() / dt;
    (0..count)
        .map(|n| {
            let start = ((n as f64 * stride_frames).round() as usize).min(len - wlen);
            CarFollowingSequence {
                frames: seq.frames[start..start + wlen].to_vec(),
                dt,
                driver_id: seq.driver_id.clone(),
                source_id: format!("{}#{n}", seq.source_id),
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
    All,
}

/// A labeled collection of sequences.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub sequences: Vec<CarFollowingSequence>,
    pub split: Split,
}

impl Dataset {
    /// Builds a dataset in which every sequence is labeled.
    pub fn labeled(sequences: Vec<CarFollowingSequence>, split: Split) -> Result<Self> {
        if let Some(s) = sequences.iter().find(|s| s.driver_id().is_none()) {
            return Err(Error::invalid(format!(
                "sequence `{}` has no driver id",
                s.source_id()
            )));
        }
        Ok(Dataset { sequences, split })
    }

    /// Distinct driver ids in sorted order; position is the driver index.
    pub fn driver_ids(&self) -> Vec<String> {
        let mut ids: Vec<String> = self
            .sequences
            .iter()
            .filter_map(|s| s.driver_id().map(str::to_owned))
            .collect();
        ids.sort();
        ids.dedup();
        ids
    }

    /// Number of sequences per driver.
    pub fn counts(&self) -> BTreeMap<String, usize> {
        let mut out = BTreeMap::new();
        for s in &self.sequences {
            if let Some(id) = s.driver_id() {
                *out.entry(id.to_owned()).or_insert(0) += 1;
            }
        }
        out
    }

    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }

    /// Resamples every sequence into fixed windows, keeping input order.
    pub fn resample(&self, cfg: &ResampleConfig) -> Dataset {
        Dataset {
            sequences: self.sequences.iter().flat_map(|s| resample(s, cfg)).collect(),
            split: self.split,
        }
    }

    /// Keeps only the sequences accepted by `criteria`.
    pub fn filter_valid(&self, criteria: &ValidationCriteria) -> (Dataset, usize) {
        let kept: Vec<_> = self
            .sequences
            .iter()
            .filter(|s| validate_car_following(s, criteria).is_ok())
            .cloned()
            .collect();
        let dropped = self.sequences.len() - kept.len();
        (
            Dataset {
                sequences: kept,
                split: self.split,
            },
            dropped,
        )
    }
}
