use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::registry::PipelineConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum RetrainSchedule {
    #[default]
    Manual,
    Daily,
    Weekly,
}

impl RetrainSchedule {
    /// Period between scheduled retrains, if any.
    pub fn period(self) -> Option<std::time::Duration> {
        const DAY: u64 = 24 * 60 * 60;
        match self {
            RetrainSchedule::Manual => None,
            RetrainSchedule::Daily => Some(std::time::Duration::from_secs(DAY)),
            RetrainSchedule::Weekly => Some(std::time::Duration::from_secs(7 * DAY)),
        }
    }
}

/// Where the engine keeps its state. With no `dir` nothing is persisted.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct StorageConfig {
    pub dir: Option<PathBuf>,
}

impl StorageConfig {
    pub fn path(&self, name: &str) -> Option<PathBuf> {
        self.dir.as_ref().map(|d| d.join(name))
    }
}

/// Labeled corpus used when the store holds none yet.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainingSource {
    pub flows: PathBuf,
    pub labels: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EngineConfig {
    #[serde(flatten)]
    pub pipeline: PipelineConfig,
    pub retrain_schedule: RetrainSchedule,
    pub storage: StorageConfig,
    pub training: Option<TrainingSource>,
    /// Run k-fold evaluation after each training so `/v1/metrics` is current.
    pub evaluate_after_training: bool,
    pub listen: String,
    /// When set, API requests must carry `Authorization: Bearer <token>`.
    pub api_token: Option<String>,
}

impl Default for EngineConfig {
    fn default() -> Self {
        EngineConfig {
            pipeline: PipelineConfig::default(),
            retrain_schedule: RetrainSchedule::Manual,
            storage: StorageConfig::default(),
            training: None,
            evaluate_after_training: true,
            listen: "127.0.0.1:8080".into(),
            api_token: None,
        }
    }
}

impl EngineConfig {
    pub fn validate(&self) -> Result<()> {
        self.pipeline.validate()?;
        if self.listen.trim().is_empty() {
            return Err(Error::Config("listen must not be empty".into()));
        }
        Ok(())
    }

    /// Reads a JSON config file. Relative paths inside it resolve against
    /// the file's directory.
    pub fn load(path: &Path) -> Result<EngineConfig> {
        let text = std::fs::read_to_string(path)?;
        let mut cfg: EngineConfig =
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        let resolve = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        if let Some(d) = cfg.storage.dir.as_mut() {
            resolve(d);
        }
        if let Some(t) = cfg.training.as_mut() {
            resolve(&mut t.flows);
            resolve(&mut t.labels);
        }
        cfg.validate()?;
        Ok(cfg)
    }
}
