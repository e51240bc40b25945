//! Run directory bookkeeping: the provenance manifest, the writer lock and
//! collision checks.

use std::collections::BTreeMap;
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use phirec_core::io;

use crate::config::ExperimentConfig;
use crate::error::{LabError, Result};

pub const MANIFEST_FILE: &str = "run.json";
pub const CONFIG_ECHO_FILE: &str = "config.toml";
pub const LOCK_FILE: &str = ".lock";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeightsRecord {
    /// Relative to the run directory.
    pub path: String,
    pub checksum: String,
    pub best_step: usize,
    pub best_score: f64,
}

/// One trained model of a run, keyed by its kind.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelRecord {
    /// Configuration the model was trained with.
    pub config: ExperimentConfig,
    pub model_hash: String,
    pub weights: WeightsRecord,
    /// Set once an evaluation of these weights is stored.
    pub evaluation_hash: Option<String>,
    /// Metric artifact name → path relative to the run directory.
    pub metrics: BTreeMap<String, String>,
}

/// Provenance of a run directory: one dataset and segmenter shared by every model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool_version: String,
    /// Configuration that created the run.
    pub config: ExperimentConfig,
    pub run_hash: String,
    pub dataset_hash: Option<String>,
    pub segmenter: Option<WeightsRecord>,
    pub models: BTreeMap<String, ModelRecord>,
    /// Stage name → wall-clock seconds of its latest execution.
    pub timings: BTreeMap<String, f64>,
}

impl RunManifest {
    pub fn new(config: &ExperimentConfig) -> Self {
        RunManifest {
            tool_version: env!("CARGO_PKG_VERSION").into(),
            config: config.clone(),
            run_hash: config.run_hash(),
            dataset_hash: None,
            segmenter: None,
            models: BTreeMap::new(),
            timings: BTreeMap::new(),
        }
    }

    /// The manifest in `run`, or a fresh one; a stored manifest whose dataset or
    /// segmenter settings differ is a collision.
    pub fn open(run: &Path, config: &ExperimentConfig) -> Result<Self> {
        let path = run.join(MANIFEST_FILE);
        if !path.exists() {
            return Ok(Self::new(config));
        }
        let stored: RunManifest = io::read_json(&path)?;
        if stored.run_hash != config.run_hash() {
            return Err(LabError::Config(format!(
                "{} holds data of a different configuration (run hash {}); use another experiment name or --force",
                run.display(),
                stored.run_hash
            )));
        }
        Ok(stored)
    }

    pub fn save(&self, run: &Path) -> Result<()> {
        io::write_json(&run.join(MANIFEST_FILE), self)?;
        io::write_atomic(
            &run.join(CONFIG_ECHO_FILE),
            self.config.to_toml().as_bytes(),
        )?;
        Ok(())
    }
}

/// Exclusive writer lock on a run directory, released on drop.
#[derive(Debug)]
pub struct RunLock {
    path: PathBuf,
}

impl RunLock {
    pub fn acquire(run: &Path) -> Result<Self> {
        fs::create_dir_all(run).map_err(|e| LabError::io(run, e))?;
        let path = run.join(LOCK_FILE);
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                let _ = write!(f, "{}", std::process::id());
                Ok(RunLock { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(LabError::Locked {
                path: run.to_path_buf(),
                holder: fs::read_to_string(&path)
                    .map(|pid| format!("pid {}", pid.trim()))
                    .unwrap_or_else(|_| "unknown holder".into()),
            }),
            Err(e) => Err(LabError::io(&path, e)),
        }
    }
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

/// Refuse to overwrite `path` unless `force`, in which case it is removed.
pub fn claim_output(path: &Path, force: bool) -> Result<()> {
    if !path.exists() {
        return Ok(());
    }
    if !force {
        return Err(LabError::Collision(path.to_path_buf()));
    }
    let removed = if path.is_dir() {
        fs::remove_dir_all(path)
    } else {
        fs::remove_file(path)
    };
    removed.map_err(|e| LabError::io(path, e))
}

/// Build a directory under a `.partial` sibling and rename it into place, so an
/// interrupted stage never leaves a half-written `out`.
pub fn stage_dir<R>(out: &Path, build: impl FnOnce(&Path) -> Result<R>) -> Result<R> {
    let mut name = out.as_os_str().to_owned();
    name.push(".partial");
    let tmp = PathBuf::from(name);
    if tmp.exists() {
        fs::remove_dir_all(&tmp).map_err(|e| LabError::io(&tmp, e))?;
    }
    let value = build(&tmp)?;
    fs::rename(&tmp, out).map_err(|e| LabError::io(out, e))?;
    Ok(value)
}
