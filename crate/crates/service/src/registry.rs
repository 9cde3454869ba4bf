//! Versioned model registry.
//!
//! Layout under `{data}/registry/`: `registry.json` lists every version with
//! its training provenance; `vNNNN/{skill}/` holds one model bundle per skill.
//! Bundles are written before `registry.json`, which is written before the
//! new version is published to readers.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use parking_lot::RwLock;
use riskwatch_core::estimator::EstimatorRegistry;
use riskwatch_core::pipeline::{load_bundle, save_bundle, BUNDLE_MANIFEST};
use riskwatch_core::riskcore::RiskModel;
use serde::{Deserialize, Serialize};

use crate::error::{Result, ServiceError};
use crate::FORMAT_VERSION;

pub const REGISTRY_FILE: &str = "registry.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkillEntry {
    /// Bundle directory relative to the registry root.
    pub bundle: String,
    pub estimator: String,
    /// Version in which this skill's encoder was last trained.
    pub encoder_version: u64,
    pub training_episodes: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VersionRecord {
    pub version: u64,
    /// `import`, `gp_only` or `gp_encoder`.
    pub scope: String,
    pub skills: BTreeMap<String, SkillEntry>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct RegistryFile {
    format_version: u32,
    versions: Vec<VersionRecord>,
}

/// A published version with its models loaded.
pub struct LoadedVersion {
    pub record: VersionRecord,
    pub models: BTreeMap<String, RiskModel>,
}

impl LoadedVersion {
    fn empty() -> Self {
        LoadedVersion {
            record: VersionRecord {
                version: 0,
                scope: "empty".into(),
                skills: BTreeMap::new(),
            },
            models: BTreeMap::new(),
        }
    }
}

pub struct ModelRegistry {
    root: PathBuf,
    tau: f64,
    current: RwLock<Arc<LoadedVersion>>,
    history: RwLock<Vec<VersionRecord>>,
}

fn internal(e: impl std::fmt::Display) -> ServiceError {
    ServiceError::Internal(e.to_string())
}

pub fn version_dir_name(version: u64) -> String {
    format!("v{version:04}")
}

impl ModelRegistry {
    /// Restores the latest registered version, or starts empty when no
    /// registry file exists yet.
    pub fn open(root: impl Into<PathBuf>, tau: f64, estimators: &EstimatorRegistry) -> Result<Self> {
        let root = root.into();
        std::fs::create_dir_all(&root).map_err(internal)?;
        let reg = ModelRegistry {
            root,
            tau,
            current: RwLock::new(Arc::new(LoadedVersion::empty())),
            history: RwLock::new(vec![]),
        };
        let path = reg.root.join(REGISTRY_FILE);
        if path.exists() {
            let bytes = std::fs::read(&path).map_err(internal)?;
            let file: RegistryFile =
                serde_json::from_slice(&bytes).map_err(|e| internal(format!("{}: {e}", path.display())))?;
            if file.format_version != FORMAT_VERSION {
                return Err(internal(format!(
                    "{}: unsupported format_version {}",
                    path.display(),
                    file.format_version
                )));
            }
            if let Some(last) = file.versions.last() {
                let loaded = reg.load_version(last, estimators)?;
                *reg.current.write() = Arc::new(loaded);
            }
            *reg.history.write() = file.versions;
        }
        Ok(reg)
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn load_version(&self, record: &VersionRecord, estimators: &EstimatorRegistry) -> Result<LoadedVersion> {
        let mut models = BTreeMap::new();
        for (skill, entry) in &record.skills {
            let (_, mut model) = load_bundle(&self.root.join(&entry.bundle), estimators)?;
            model.tau = self.tau;
            models.insert(skill.clone(), model);
        }
        Ok(LoadedVersion {
            record: record.clone(),
            models,
        })
    }

    pub fn current(&self) -> Arc<LoadedVersion> {
        self.current.read().clone()
    }

    pub fn versions(&self) -> Vec<VersionRecord> {
        self.history.read().clone()
    }

    pub fn next_version(&self) -> u64 {
        self.history.read().last().map_or(1, |v| v.version + 1)
    }

    /// Bundle directory for `skill` in a version not yet published.
    pub fn bundle_path(&self, version: u64, skill: &str) -> (String, PathBuf) {
        let rel = format!("{}/{skill}", version_dir_name(version));
        let abs = self.root.join(&rel);
        (rel, abs)
    }

    /// Persists `models` as a new version and makes it current. Sessions
    /// holding the previous version keep it.
    pub fn publish(&self, scope: &str, models: BTreeMap<String, (RiskModel, SkillEntry)>) -> Result<u64> {
        let version = self.next_version();
        let mut record = VersionRecord {
            version,
            scope: scope.to_string(),
            skills: BTreeMap::new(),
        };
        let mut loaded = BTreeMap::new();
        for (skill, (mut model, entry)) in models {
            let dir = self.root.join(&entry.bundle);
            if !dir.join(BUNDLE_MANIFEST).exists() {
                save_bundle(&dir, &skill, &model, &entry.training_episodes)?;
            }
            model.tau = self.tau;
            record.skills.insert(skill.clone(), entry);
            loaded.insert(skill, model);
        }
        let mut history = self.history.write();
        let mut versions = history.clone();
        versions.push(record.clone());
        let file = RegistryFile {
            format_version: FORMAT_VERSION,
            versions,
        };
        let path = self.root.join(REGISTRY_FILE);
        let tmp = self.root.join(format!("{REGISTRY_FILE}.tmp"));
        let json = serde_json::to_vec_pretty(&file).map_err(internal)?;
        std::fs::write(&tmp, json).map_err(internal)?;
        std::fs::rename(&tmp, &path).map_err(internal)?;
        *history = file.versions;
        *self.current.write() = Arc::new(LoadedVersion {
            record,
            models: loaded,
        });
        Ok(version)
    }

    /// Registers command-line trained bundles found under
    /// `{checkpoints}/{skill}/{estimator}/` as the first version. Does
    /// nothing once any version exists.
    pub fn import_checkpoints(
        &self,
        checkpoints: &Path,
        estimator: &str,
        estimators: &EstimatorRegistry,
    ) -> Result<Option<u64>> {
        if !self.history.read().is_empty() || !checkpoints.is_dir() {
            return Ok(None);
        }
        let version = self.next_version();
        let mut found = BTreeMap::new();
        let mut skills: Vec<_> = std::fs::read_dir(checkpoints)
            .map_err(internal)?
            .filter_map(|e| e.ok())
            .filter(|e| e.path().join(estimator).join(BUNDLE_MANIFEST).is_file())
            .map(|e| e.file_name().to_string_lossy().into_owned())
            .collect();
        skills.sort();
        for skill in skills {
            let (manifest, model) = load_bundle(&checkpoints.join(&skill).join(estimator), estimators)?;
            let (rel, _) = self.bundle_path(version, &skill);
            let entry = SkillEntry {
                bundle: rel,
                estimator: estimator.to_string(),
                encoder_version: version,
                training_episodes: manifest.training_episodes,
            };
            found.insert(skill, (model, entry));
        }
        if found.is_empty() {
            return Ok(None);
        }
        self.publish("import", found).map(Some)
    }
}
