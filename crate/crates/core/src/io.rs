//! On-disk formats: sequence CSV, dataset directories, model JSON and
//! feature dumps.
//!
//! Floats are written in Rust's shortest round-trip decimal form, so every
//! file reads back to the same bits.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::domain::{CarFollowingSequence, Dataset, Frame, Split, DEFAULT_DT};
use crate::features::{ProjectionModel, RawFeatureVector, Standardizer, N_FEATURES};
use crate::model::{DriverProfile, DriverState, GenerativeModel, ModelHyper};
use crate::{Error, Result};

pub const SEQUENCE_HEADER: [&str; 5] = ["t", "v", "a", "h", "hdot"];
pub const MODEL_SCHEMA_VERSION: u32 = 1;

/// Relative tolerance on the spacing of the `t` column.
const DT_TOL: f64 = 1e-6;

fn format_err(path: &Path, msg: impl Into<String>) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        msg: msg.into(),
    }
}

pub fn sequence_to_csv(seq: &CarFollowingSequence) -> String {
    let mut s = SEQUENCE_HEADER.join(",");
    s.push('\n');
    for (i, f) in seq.frames().iter().enumerate() {
        let t = i as f64 * seq.dt();
        let _ = writeln!(s, "{t},{},{},{},{}", f.v, f.a, f.h, f.hdot);
    }
    s
}

/// Parses a sequence CSV; `dt` is taken from the `t` column, which must be
/// strictly increasing with a fixed step.
pub fn sequence_from_csv(
    text: &str,
    driver_id: Option<String>,
    source_id: &str,
    path: &Path,
) -> Result<CarFollowingSequence> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(text.as_bytes());
    let header: Vec<String> = rdr.headers()?.iter().map(str::to_owned).collect();
    if header != SEQUENCE_HEADER {
        return Err(format_err(path, format!("expected header `t,v,a,h,hdot`, got `{}`", header.join(","))));
    }
    let mut ts = Vec::new();
    let mut frames = Vec::new();
    for (row, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let mut vals = [0.0; 5];
        for (j, v) in vals.iter_mut().enumerate() {
            *v = rec[j]
                .parse()
                .map_err(|_| format_err(path, format!("row {}: cannot parse `{}` as a number", row + 2, &rec[j])))?;
        }
        ts.push(vals[0]);
        frames.push(Frame::new(vals[1], vals[2], vals[3], vals[4]));
    }
    if frames.is_empty() {
        return Err(format_err(path, "no frames"));
    }
    let dt = if ts.len() >= 2 { ts[1] - ts[0] } else { DEFAULT_DT };
    if !(dt > 0.0) {
        return Err(format_err(path, "t must be strictly increasing"));
    }
    for (i, w) in ts.windows(2).enumerate() {
        if ((w[1] - w[0]) - dt).abs() > DT_TOL * dt.max(1.0) {
            return Err(format_err(path, format!("row {}: irregular time step", i + 3)));
        }
    }
    CarFollowingSequence::new(frames, dt, driver_id, source_id).map_err(|e| format_err(path, e.to_string()))
}

pub fn read_sequence(path: &Path, driver_id: Option<String>) -> Result<CarFollowingSequence> {
    let text = fs::read_to_string(path).map_err(|e| format_err(path, e.to_string()))?;
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("sequence");
    sequence_from_csv(&text, driver_id, stem, path)
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = fs::read_dir(dir)
        .map_err(|e| format_err(dir, e.to_string()))?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<Vec<_>>>()?;
    out.sort();
    Ok(out)
}

fn csv_files(dir: &Path) -> Result<Vec<PathBuf>> {
    Ok(sorted_entries(dir)?
        .into_iter()
        .filter(|p| p.is_file() && p.extension().is_some_and(|e| e == "csv"))
        .collect())
}

/// All sequences of one driver directory, labeled with `driver_id`.
pub fn read_driver_dir(dir: &Path, driver_id: &str) -> Result<Vec<CarFollowingSequence>> {
    csv_files(dir)?
        .iter()
        .map(|p| read_sequence(p, Some(driver_id.to_owned())))
        .collect()
}

/// Reads `<root>/<driver_id>/<seq>.csv`, in sorted order.
pub fn read_dataset(root: &Path, split: Split) -> Result<Dataset> {
    let mut seqs = Vec::new();
    for dir in sorted_entries(root)?.into_iter().filter(|p| p.is_dir()) {
        let id = dir
            .file_name()
            .and_then(|s| s.to_str())
            .ok_or_else(|| format_err(&dir, "driver directory name is not UTF-8"))?
            .to_owned();
        seqs.extend(read_driver_dir(&dir, &id)?);
    }
    if seqs.is_empty() {
        return Err(format_err(root, "no sequences found under <driver_id>/<seq>.csv"));
    }
    Dataset::labeled(seqs, split)
}

/// Writes `<root>/<driver_id>/<source_id>.csv`.
pub fn write_dataset(root: &Path, ds: &Dataset) -> Result<()> {
    for seq in &ds.sequences {
        let id = seq
            .driver_id()
            .ok_or_else(|| Error::invalid(format!("sequence `{}` has no driver id", seq.source_id())))?;
        let dir = root.join(id);
        fs::create_dir_all(&dir)?;
        fs::write(dir.join(format!("{}.csv", seq.source_id())), sequence_to_csv(seq))?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateDoc {
    pub mu: Vec<f64>,
    /// Row-major rows.
    pub sigma: Vec<Vec<f64>>,
}

/// Serialized form of a [`GenerativeModel`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelDoc {
    pub version: u32,
    pub hyper: ModelHyper,
    pub standardizer: Standardizer,
    /// `M × 8`, row-major.
    #[serde(rename = "A")]
    pub a: Vec<f64>,
    pub states: Vec<StateDoc>,
    pub profiles: BTreeMap<String, Vec<f64>>,
}

impl ModelDoc {
    pub fn from_model(model: &GenerativeModel) -> Self {
        let states = model
            .states()
            .iter()
            .map(|s| StateDoc {
                mu: s.mu.iter().copied().collect(),
                sigma: s.sigma.row_iter().map(|r| r.iter().copied().collect()).collect(),
            })
            .collect();
        let profiles = model
            .driver_ids()
            .iter()
            .zip(model.profiles())
            .map(|(id, p)| (id.clone(), p.weights().to_vec()))
            .collect();
        ModelDoc {
            version: MODEL_SCHEMA_VERSION,
            hyper: model.hyper().clone(),
            standardizer: model.standardizer().clone(),
            a: model.projection().to_row_major(),
            states,
            profiles,
        }
    }

    pub fn into_model(self) -> Result<GenerativeModel> {
        if self.version != MODEL_SCHEMA_VERSION {
            return Err(Error::SchemaVersion {
                found: self.version,
                expected: MODEL_SCHEMA_VERSION,
            });
        }
        let m = self.hyper.m;
        if self.a.len() != m * N_FEATURES {
            return Err(Error::DimensionMismatch {
                expected: m * N_FEATURES,
                got: self.a.len(),
            });
        }
        let projection = ProjectionModel::from_row_major(m, &self.a)?;
        let states = self
            .states
            .into_iter()
            .map(|s| {
                let d = s.mu.len();
                if s.sigma.len() != d || s.sigma.iter().any(|r| r.len() != d) {
                    return Err(Error::invalid(format!("state covariance is not {d}x{d}")));
                }
                let sigma = DMatrix::from_row_iterator(d, d, s.sigma.into_iter().flatten());
                DriverState::new(DVector::from_vec(s.mu), sigma)
            })
            .collect::<Result<Vec<_>>>()?;
        let profiles = self
            .profiles
            .into_iter()
            .map(|(id, w)| Ok((id, DriverProfile::new(w)?)))
            .collect::<Result<Vec<_>>>()?;
        GenerativeModel::new(self.standardizer, projection, states, profiles, self.hyper)
    }
}

pub fn model_to_json(model: &GenerativeModel) -> Result<String> {
    let mut s = serde_json::to_string_pretty(&ModelDoc::from_model(model))?;
    s.push('\n');
    Ok(s)
}

pub fn model_from_json(text: &str) -> Result<GenerativeModel> {
    // Check the version before the full schema so old files fail clearly.
    let value: serde_json::Value = serde_json::from_str(text)?;
    let found = value.get("version").and_then(|v| v.as_u64()).unwrap_or(0) as u32;
    if found != MODEL_SCHEMA_VERSION {
        return Err(Error::SchemaVersion {
            found,
            expected: MODEL_SCHEMA_VERSION,
        });
    }
    serde_json::from_value::<ModelDoc>(value)?.into_model()
}

pub fn read_model(path: &Path) -> Result<GenerativeModel> {
    let text = fs::read_to_string(path).map_err(|e| format_err(path, e.to_string()))?;
    model_from_json(&text).map_err(|e| match e {
        Error::Json(j) => format_err(path, j.to_string()),
        other => other,
    })
}

/// `driver_id,window_id,f1..f8`
pub fn features_to_csv(windows: &[CarFollowingSequence], raw: &[RawFeatureVector]) -> String {
    let mut s = String::from("driver_id,window_id");
    for j in 1..=N_FEATURES {
        let _ = write!(s, ",f{j}");
    }
    s.push('\n');
    for (w, f) in windows.iter().zip(raw) {
        let _ = write!(s, "{},{}", w.driver_id().unwrap_or(""), w.source_id());
        for x in f.0 {
            let _ = write!(s, ",{x}");
        }
        s.push('\n');
    }
    s
}
