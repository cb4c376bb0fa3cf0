//! Run directories and manifests: one directory per run, never reused.

use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use crate::error::{HliError, Result};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub seed: u64,
    pub version: String,
    /// Unix timestamps in seconds.
    pub started_at: u64,
    pub finished_at: u64,
    /// Full config echoed as TOML for diff-able runs.
    pub config_toml: String,
    /// Relative paths of artifacts written into the run directory.
    pub artifacts: BTreeMap<String, String>,
    /// Scalar results (mAP, accuracies, ...).
    pub metrics: BTreeMap<String, f64>,
}

impl RunManifest {
    pub fn new(command: &str, seed: u64, config_toml: String) -> Self {
        Self {
            command: command.to_string(),
            seed,
            version: env!("CARGO_PKG_VERSION").to_string(),
            started_at: unix_now(),
            finished_at: 0,
            config_toml,
            artifacts: BTreeMap::new(),
            metrics: BTreeMap::new(),
        }
    }

    pub fn artifact(&mut self, key: &str, relative_path: &str) {
        self.artifacts.insert(key.into(), relative_path.into());
    }

    pub fn metric(&mut self, key: &str, value: f64) {
        self.metrics.insert(key.into(), value);
    }

    /// Finalize and write `manifest.json`; refuses to overwrite an existing
    /// manifest (run directories are single-use).
    pub fn write(mut self, run_dir: &Path) -> Result<()> {
        let path = run_dir.join("manifest.json");
        if path.exists() {
            return Err(HliError::InvalidArgument(format!(
                "{} already exists; run directories are never reused",
                path.display()
            )));
        }
        self.finished_at = unix_now();
        std::fs::write(&path, serde_json::to_string_pretty(&self).unwrap())?;
        Ok(())
    }

    pub fn read(run_dir: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(run_dir.join("manifest.json"))?;
        serde_json::from_str(&text)
            .map_err(|e| HliError::InvalidArgument(format!("bad manifest: {e}")))
    }
}

fn unix_now() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

/// Create `<base>/<prefix>-NNN` with the smallest unused NNN. Creation is
/// atomic (create_dir), so an existing run is never reopened.
pub fn create_run_dir(base: &Path, prefix: &str) -> Result<PathBuf> {
    std::fs::create_dir_all(base)?;
    for n in 0..10_000u32 {
        let candidate = base.join(format!("{prefix}-{n:03}"));
        match std::fs::create_dir(&candidate) {
            Ok(()) => return Ok(candidate),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => continue,
            Err(e) => return Err(e.into()),
        }
    }
    Err(HliError::InvalidArgument(format!(
        "no free run directory under {} for prefix {prefix}",
        base.display()
    )))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn run_dirs_never_collide() {
        let tmp = tempfile::tempdir().unwrap();
        let a = create_run_dir(tmp.path(), "pretrain").unwrap();
        let b = create_run_dir(tmp.path(), "pretrain").unwrap();
        assert_ne!(a, b);
        assert!(a.ends_with("pretrain-000"));
        assert!(b.ends_with("pretrain-001"));
    }

    #[test]
    fn manifest_round_trips_and_refuses_overwrite() {
        let tmp = tempfile::tempdir().unwrap();
        let dir = create_run_dir(tmp.path(), "adapt").unwrap();
        let mut m = RunManifest::new("adapt", 7, "seed = 7".into());
        m.artifact("metrics", "metrics.csv");
        m.metric("best_map", 0.5);
        m.clone().write(&dir).unwrap();
        let back = RunManifest::read(&dir).unwrap();
        assert_eq!(back.seed, 7);
        assert_eq!(back.metrics["best_map"], 0.5);
        assert_eq!(back.artifacts["metrics"], "metrics.csv");
        assert!(m.write(&dir).is_err());
    }
}
