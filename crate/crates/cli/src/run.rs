//! Run directories, resolved-config records and atomic file writes.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::de::DeserializeOwned;
use serde::Serialize;
use sha2::{Digest, Sha256};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

/// Name of the resolved-config file inside every run directory.
pub const CONFIG_FILE: &str = "config.json";

/// Loads a JSON config, or the default when no path is given. Unknown keys
/// (such as the `tool`/`version` stamp of a run directory) are ignored.
pub fn load_config<C: DeserializeOwned + Default>(path: Option<&Path>) -> Result<C> {
    match path {
        None => Ok(C::default()),
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
            Ok(serde_json::from_str(&text).map_err(drivprof::Error::from)?)
        }
    }
}

pub fn to_json<T: Serialize>(value: &T) -> Result<String> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    Ok(s)
}

/// First 12 hex digits of the SHA-256 of the command name and the
/// canonical JSON of its resolved config.
pub fn config_hash<C: Serialize>(command: &str, cfg: &C) -> Result<String> {
    let mut h = Sha256::new();
    h.update(command.as_bytes());
    h.update([0]);
    h.update(serde_json::to_vec(cfg)?);
    Ok(hex::encode(h.finalize())[..12].to_owned())
}

/// Resolved config stamped with the tool version. The config's own keys sit
/// at the top level so the file can be fed back through `--config`.
pub fn config_record<C: Serialize>(command: &str, cfg: &C) -> Result<String> {
    let mut v = serde_json::to_value(cfg)?;
    let obj = v.as_object_mut().context("config must serialize to a JSON object")?;
    obj.insert("tool".into(), "drivprof".into());
    obj.insert("tool_version".into(), VERSION.into());
    obj.insert("command".into(), command.into());
    to_json(&v)
}

/// Creates `<root>/<command>-<hash>` and writes the config record into it.
pub fn create_run_dir<C: Serialize>(root: &Path, command: &str, cfg: &C) -> Result<PathBuf> {
    let dir = root.join(format!("{command}-{}", config_hash(command, cfg)?));
    fs::create_dir_all(&dir).with_context(|| format!("creating run directory {}", dir.display()))?;
    write_atomic(&dir.join(CONFIG_FILE), config_record(command, cfg)?.as_bytes())?;
    Ok(dir)
}

/// Writes through a temporary file in the target directory, then renames.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let parent = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    let mut tmp = tempfile::NamedTempFile::new_in(parent)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

/// Builds a directory tree in a sibling temporary directory and renames it
/// into place. `target` must not exist or be an empty directory.
pub fn write_dir_atomic(target: &Path, fill: impl FnOnce(&Path) -> Result<()>) -> Result<()> {
    if target.exists() {
        let empty = target.is_dir() && fs::read_dir(target)?.next().is_none();
        if !empty {
            bail!(drivprof::Error::Invalid(format!(
                "output directory {} already exists and is not empty",
                target.display()
            )));
        }
    }
    let parent = match target.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    fs::create_dir_all(parent)?;
    let tmp = tempfile::Builder::new().prefix(".drivprof-").tempdir_in(parent)?;
    fill(tmp.path())?;
    if target.exists() {
        fs::remove_dir(target)?;
    }
    let staged = tmp.keep();
    fs::rename(&staged, target).with_context(|| format!("moving output into {}", target.display()))?;
    Ok(())
}
