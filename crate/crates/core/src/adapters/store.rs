//! Ordered on-disk collection of task learners.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::toyldm::ConceptLookup;

use super::{learner::save_learner, load_learner, TaskLearner};

pub const MANIFEST_NAME: &str = "manifest.toml";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub task_id: usize,
    pub file: String,
    pub tokens: Vec<String>,
}

/// Manifest: task order, concept tokens and the configuration hash the
/// store was created under.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StoreManifest {
    pub version: u32,
    pub config_hash: String,
    pub tasks: Vec<ManifestEntry>,
}

/// Learners in learning order. Disk-backed when created with a directory;
/// purely in-memory stores are available for composition at inference
/// time and in tests.
pub struct LearnerStore {
    dir: Option<PathBuf>,
    manifest: StoreManifest,
    learners: Vec<TaskLearner>,
}

impl LearnerStore {
    /// Creates an empty disk-backed store. The directory must not already
    /// contain a manifest.
    pub fn create(dir: &Path, config_hash: &str) -> Result<Self> {
        fs::create_dir_all(dir)?;
        let manifest_path = dir.join(MANIFEST_NAME);
        if manifest_path.exists() {
            return Err(Error::Sequencing(format!(
                "store already exists at {}",
                dir.display()
            )));
        }
        let store = Self {
            dir: Some(dir.to_path_buf()),
            manifest: StoreManifest {
                version: 1,
                config_hash: config_hash.to_string(),
                tasks: Vec::new(),
            },
            learners: Vec::new(),
        };
        store.write_manifest()?;
        Ok(store)
    }

    /// Opens an existing store, loading every learner in manifest order.
    pub fn open(dir: &Path) -> Result<Self> {
        let manifest_path = dir.join(MANIFEST_NAME);
        let text = fs::read_to_string(&manifest_path).map_err(|_| {
            Error::Sequencing(format!("no learner store at {}", dir.display()))
        })?;
        let manifest: StoreManifest =
            toml::from_str(&text).map_err(|e| Error::Integrity(format!("store manifest: {e}")))?;
        let mut learners = Vec::with_capacity(manifest.tasks.len());
        for (i, entry) in manifest.tasks.iter().enumerate() {
            let (learner, hash) = load_learner(&dir.join(&entry.file))?;
            if learner.task_id != entry.task_id || learner.task_id != i + 1 {
                return Err(Error::Integrity(format!(
                    "learner file {} carries task id {}, manifest position {}",
                    entry.file,
                    learner.task_id,
                    i + 1
                )));
            }
            if hash != manifest.config_hash {
                return Err(Error::Integrity(format!(
                    "learner file {} was written under config {} but the store is {}",
                    entry.file, hash, manifest.config_hash
                )));
            }
            learners.push(learner);
        }
        Ok(Self { dir: Some(dir.to_path_buf()), manifest, learners })
    }

    /// In-memory store, used when composing learners without persistence.
    pub fn ephemeral(config_hash: &str) -> Self {
        Self {
            dir: None,
            manifest: StoreManifest {
                version: 1,
                config_hash: config_hash.to_string(),
                tasks: Vec::new(),
            },
            learners: Vec::new(),
        }
    }

    fn write_manifest(&self) -> Result<()> {
        if let Some(dir) = &self.dir {
            let text = toml::to_string(&self.manifest).expect("manifest serializes");
            fs::write(dir.join(MANIFEST_NAME), text)?;
        }
        Ok(())
    }

    /// Appends a finalized learner, enforcing the learning order and the
    /// disjointness of concept tokens across tasks.
    pub fn push(&mut self, learner: TaskLearner) -> Result<()> {
        if learner.task_id != self.learners.len() + 1 {
            return Err(Error::Sequencing(format!(
                "store holds {} tasks, cannot append task id {}",
                self.learners.len(),
                learner.task_id
            )));
        }
        let known: HashSet<&str> =
            self.learners.iter().flat_map(|l| l.token_names.iter().map(String::as_str)).collect();
        for name in &learner.token_names {
            if known.contains(name.as_str()) {
                return Err(Error::Uniqueness(name.clone()));
            }
        }
        let file = format!("task{:03}.learner", learner.task_id);
        if let Some(dir) = &self.dir {
            save_learner(&learner, &dir.join(&file), &self.manifest.config_hash)?;
        }
        self.manifest.tasks.push(ManifestEntry {
            task_id: learner.task_id,
            file,
            tokens: learner.token_names.clone(),
        });
        self.learners.push(learner);
        self.write_manifest()
    }

    pub fn learners(&self) -> &[TaskLearner] {
        &self.learners
    }

    pub fn len(&self) -> usize {
        self.learners.len()
    }

    pub fn is_empty(&self) -> bool {
        self.learners.is_empty()
    }

    pub fn config_hash(&self) -> &str {
        &self.manifest.config_hash
    }

    pub fn manifest(&self) -> &StoreManifest {
        &self.manifest
    }

    pub fn dir(&self) -> Option<&Path> {
        self.dir.as_deref()
    }

    /// Total bytes of the manifest plus learner files.
    pub fn stored_bytes(&self) -> Result<u64> {
        let Some(dir) = &self.dir else {
            return Err(Error::State("ephemeral store has no files".into()));
        };
        let mut total = fs::metadata(dir.join(MANIFEST_NAME))?.len();
        for entry in &self.manifest.tasks {
            total += fs::metadata(dir.join(&entry.file))?.len();
        }
        Ok(total)
    }

    /// All concept tokens learned so far, grouped per task.
    pub fn tokens_by_task(&self) -> Vec<&[String]> {
        self.learners.iter().map(|l| l.token_names.as_slice()).collect()
    }
}

impl ConceptLookup for LearnerStore {
    fn concept_row(&self, name: &str, layer: usize) -> Option<Vec<f64>> {
        self.learners.iter().find_map(|l| l.concept_row(name, layer))
    }
}
