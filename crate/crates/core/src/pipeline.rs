//! Raw sequences to a trained model: resample, featurize, standardize,
//! train.

use serde::{Deserialize, Serialize};

use crate::domain::{CarFollowingSequence, Dataset, ResampleConfig};
use crate::features::{extract_all, RawFeatureVector, ReactionTimeConfig, Standardizer};
use crate::model::GenerativeModel;
use crate::training::{train, TrainOutput, TrainingConfig, TrainingSet};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    /// Window duration `T` (s).
    pub window: f64,
    /// Overlap ratio used to resample the training sequences.
    pub overlap: f64,
    pub reaction_time: ReactionTimeConfig,
    pub training: TrainingConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            window: 15.0,
            overlap: 0.0,
            reaction_time: ReactionTimeConfig::default(),
            training: TrainingConfig::default(),
        }
    }
}

impl PipelineConfig {
    pub fn train_resample(&self) -> Result<ResampleConfig> {
        ResampleConfig::new(self.window, self.overlap)
    }

    /// Test and inference windows never overlap.
    pub fn test_resample(&self) -> Result<ResampleConfig> {
        ResampleConfig::new(self.window, 0.0)
    }
}

/// Windows with their raw features, in dataset order.
#[derive(Debug, Clone)]
pub struct FeatureTable {
    pub windows: Vec<CarFollowingSequence>,
    pub raw: Vec<RawFeatureVector>,
}

impl FeatureTable {
    pub fn build(ds: &Dataset, resample: &ResampleConfig, rt: &ReactionTimeConfig) -> Result<Self> {
        let windows = ds.resample(resample).sequences;
        let raw = extract_all(&windows, rt)?;
        Ok(FeatureTable { windows, raw })
    }

    pub fn len(&self) -> usize {
        self.windows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.windows.is_empty()
    }

    /// Standardized features with labels indexed into `driver_ids`.
    pub fn training_set(&self, standardizer: &Standardizer, driver_ids: &[String]) -> Result<TrainingSet> {
        let labels = self
            .windows
            .iter()
            .map(|w| {
                let id = w.driver_id().ok_or_else(|| Error::invalid("unlabeled training window"))?;
                driver_ids
                    .binary_search_by(|d| d.as_str().cmp(id))
                    .map_err(|_| Error::UnknownDriver(id.to_owned()))
            })
            .collect::<Result<Vec<_>>>()?;
        let features = self.raw.iter().map(|x| standardizer.standardize(x)).collect();
        TrainingSet::new(features, labels, driver_ids.to_vec())
    }
}

pub struct Fitted {
    pub output: TrainOutput,
    pub n_train_windows: usize,
}

impl Fitted {
    pub fn model(&self) -> &GenerativeModel {
        &self.output.model
    }
}

/// Resamples the training split, fits the standardizer on it and trains.
pub fn fit(train_raw: &Dataset, cfg: &PipelineConfig) -> Result<Fitted> {
    let table = FeatureTable::build(train_raw, &cfg.train_resample()?, &cfg.reaction_time)?;
    if table.len() < 2 {
        return Err(Error::invalid(format!(
            "only {} training windows of {} s; need at least 2",
            table.len(),
            cfg.window
        )));
    }
    let standardizer = Standardizer::fit(&table.raw)?;
    let driver_ids = train_raw.driver_ids();
    let set = table.training_set(&standardizer, &driver_ids)?;
    let output = train(&set, &standardizer, &cfg.training, cfg.window, cfg.overlap, cfg.reaction_time)?;
    Ok(Fitted {
        output,
        n_train_windows: table.len(),
    })
}
