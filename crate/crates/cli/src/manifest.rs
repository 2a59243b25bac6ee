//! Sweep manifest: the single record of which runs exist, where their
//! artifacts live and how far each got.
//!
//! Every mutation happens under an exclusive lock file and is published with
//! an atomic rename, so concurrent processes never observe a torn manifest.

use std::collections::BTreeMap;
use std::fmt;
use std::fs::OpenOptions;
use std::path::{Path, PathBuf};
use std::thread;
use std::time::{Duration, Instant};

use conceptlm::conceptset::SupervisionProportion;
use conceptlm::corpus::Profile;
use conceptlm::model::write_atomic;
use conceptlm::{Error, Result};
use serde::{Deserialize, Serialize};

use crate::config::Mode;

pub const MANIFEST_FILE: &str = "manifest.json";
const LOCK_FILE: &str = "manifest.lock";
const LOCK_TIMEOUT: Duration = Duration::from_secs(120);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RunStatus {
    Pending,
    Running,
    Done,
    Failed,
}

impl RunStatus {
    fn rank(self) -> u8 {
        match self {
            RunStatus::Pending => 0,
            RunStatus::Running => 1,
            RunStatus::Done | RunStatus::Failed => 2,
        }
    }

    /// Transitions only move forward; re-entering `running` is allowed so an
    /// interrupted run can resume.
    pub fn can_become(self, next: RunStatus) -> bool {
        next == self && next == RunStatus::Running || next.rank() > self.rank()
    }

    pub fn as_str(self) -> &'static str {
        match self {
            RunStatus::Pending => "pending",
            RunStatus::Running => "running",
            RunStatus::Done => "done",
            RunStatus::Failed => "failed",
        }
    }
}

impl fmt::Display for RunStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridPoint {
    pub lambda: f64,
    pub mode: Mode,
    pub proportion: SupervisionProportion,
    pub profile: Profile,
    pub model_size: String,
}

impl GridPoint {
    /// Stable id, e.g. `A-desk-concepts-all-l0.50`.
    pub fn run_id(&self) -> String {
        format!(
            "{}-{}-{}-{}-l{:.2}",
            self.profile.as_str(),
            self.model_size,
            self.mode,
            self.proportion.as_str(),
            self.lambda
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunEntry {
    pub id: String,
    pub point: GridPoint,
    pub seed: u64,
    pub status: RunStatus,
    /// Artifact name → path relative to the run root.
    #[serde(default)]
    pub artifacts: BTreeMap<String, PathBuf>,
    #[serde(default)]
    pub message: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub master_seed: u64,
    pub runs: Vec<RunEntry>,
    /// Base models keyed `<profile>-<size>`, with their artifacts.
    #[serde(default)]
    pub bases: BTreeMap<String, BTreeMap<String, PathBuf>>,
}

impl RunManifest {
    pub fn get(&self, id: &str) -> Option<&RunEntry> {
        self.runs.iter().find(|r| r.id == id)
    }

    pub fn get_mut(&mut self, id: &str) -> Option<&mut RunEntry> {
        self.runs.iter_mut().find(|r| r.id == id)
    }

    /// Adds a pending entry unless one with the same id exists. Returns
    /// whether the entry was new.
    pub fn ensure(&mut self, point: GridPoint, seed: u64) -> bool {
        let id = point.run_id();
        if self.get(&id).is_some() {
            return false;
        }
        self.runs.push(RunEntry {
            id,
            point,
            seed,
            status: RunStatus::Pending,
            artifacts: BTreeMap::new(),
            message: None,
        });
        true
    }

    pub fn set_status(
        &mut self,
        id: &str,
        status: RunStatus,
        message: Option<String>,
    ) -> Result<()> {
        let entry = self
            .get_mut(id)
            .ok_or_else(|| Error::config(format!("no run {id:?} in manifest")))?;
        if !entry.status.can_become(status) {
            return Err(Error::config(format!(
                "run {id}: illegal status change {} -> {status}",
                entry.status
            )));
        }
        entry.status = status;
        entry.message = message;
        Ok(())
    }
}

/// Manifest file plus its lock, rooted in one run directory.
#[derive(Debug, Clone)]
pub struct ManifestStore {
    root: PathBuf,
}

struct LockGuard(PathBuf);

impl Drop for LockGuard {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.0);
    }
}

impl ManifestStore {
    pub fn new(root: &Path) -> Self {
        Self {
            root: root.to_path_buf(),
        }
    }

    pub fn path(&self) -> PathBuf {
        self.root.join(MANIFEST_FILE)
    }

    fn lock(&self) -> Result<LockGuard> {
        let path = self.root.join(LOCK_FILE);
        let start = Instant::now();
        loop {
            match OpenOptions::new().write(true).create_new(true).open(&path) {
                Ok(_) => return Ok(LockGuard(path)),
                Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                    if start.elapsed() > LOCK_TIMEOUT {
                        return Err(Error::config(format!(
                            "manifest lock {} held for over {}s; remove it if no other process is running",
                            path.display(),
                            LOCK_TIMEOUT.as_secs()
                        )));
                    }
                    thread::sleep(Duration::from_millis(20));
                }
                Err(e) => return Err(e.into()),
            }
        }
    }

    /// Current manifest; an absent file reads as empty.
    pub fn load(&self) -> Result<RunManifest> {
        match std::fs::read(self.path()) {
            Ok(bytes) => Ok(serde_json::from_slice(&bytes)?),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(RunManifest::default()),
            Err(e) => Err(e.into()),
        }
    }

    /// Read-modify-write under the lock.
    pub fn update<T>(&self, f: impl FnOnce(&mut RunManifest) -> Result<T>) -> Result<T> {
        std::fs::create_dir_all(&self.root)?;
        let _guard = self.lock()?;
        let mut m = self.load()?;
        let out = f(&mut m)?;
        write_atomic(&self.path(), serde_json::to_string_pretty(&m)?.as_bytes())?;
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn point(lambda: f64) -> GridPoint {
        GridPoint {
            lambda,
            mode: Mode::Concepts,
            proportion: SupervisionProportion::All,
            profile: Profile::A,
            model_size: "desk".into(),
        }
    }

    #[test]
    fn ids_and_ensure() {
        assert_eq!(point(0.5).run_id(), "A-desk-concepts-all-l0.50");
        let mut m = RunManifest::default();
        assert!(m.ensure(point(0.5), 1));
        assert!(!m.ensure(point(0.5), 2));
        assert_eq!(m.runs.len(), 1);
        assert_eq!(m.runs[0].seed, 1);
    }

    #[test]
    fn status_moves_forward_only() {
        use RunStatus::*;
        assert!(
            Pending.can_become(Running) && Running.can_become(Done) && Running.can_become(Failed)
        );
        assert!(Pending.can_become(Failed) && Running.can_become(Running));
        assert!(
            !Done.can_become(Running) && !Failed.can_become(Done) && !Running.can_become(Pending)
        );
        assert!(!Done.can_become(Done));
        let mut m = RunManifest::default();
        m.ensure(point(0.0), 0);
        let id = point(0.0).run_id();
        m.set_status(&id, Running, None).unwrap();
        m.set_status(&id, Done, None).unwrap();
        assert!(m.set_status(&id, Running, None).is_err());
        assert!(m.set_status("nope", Running, None).is_err());
    }

    #[test]
    fn store_round_trip_and_lock_release() {
        let dir = tempfile::tempdir().unwrap();
        let store = ManifestStore::new(dir.path());
        assert_eq!(store.load().unwrap(), RunManifest::default());
        store.update(|m| Ok(m.ensure(point(1.0), 7))).unwrap();
        store.update(|m| Ok(m.ensure(point(0.25), 8))).unwrap();
        let m = store.load().unwrap();
        assert_eq!(m.runs.len(), 2);
        assert!(!dir.path().join(LOCK_FILE).exists());
        let failed: Result<()> = store.update(|_| Err(Error::config("boom")));
        assert!(failed.is_err());
        assert!(!dir.path().join(LOCK_FILE).exists());
        assert_eq!(store.load().unwrap(), m);
    }
}
