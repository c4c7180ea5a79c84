//! Experiment configuration file and its content hash.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::class_semantics::{load_embeddings, ClassRegistry, EmbeddingTable};
use crate::engine::{ArchConfig, TrainConfig};
use crate::error::{Error, Result};
use crate::objectives::LossConfig;
use crate::protocol::{build_schedule, ClassOrdering, ProtocolMode, TaskSchedule};
use crate::synthdata::default_taxonomy;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleConfig {
    pub n_base: usize,
    pub n_per_step: usize,
    pub mode: ProtocolMode,
    #[serde(default)]
    pub ordering: ClassOrdering,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EngineConfig {
    pub arch: ArchConfig,
    pub base: TrainConfig,
    pub incremental: TrainConfig,
}

impl Default for EngineConfig {
    fn default() -> Self {
        Self {
            arch: ArchConfig::default(),
            base: TrainConfig {
                lr: 0.1,
                ..TrainConfig::default()
            },
            incremental: TrainConfig {
                lr: 0.001,
                head_lr_scale: 10.0,
                ..TrainConfig::default()
            },
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MemoryKind {
    #[default]
    None,
    Episodic,
    External,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MemoryConfig {
    pub kind: MemoryKind,
    /// Entries kept for episodic memory.
    pub capacity: usize,
    /// Fraction of every batch drawn from memory.
    pub ratio: f64,
    /// `class<TAB>image` listing for external memory.
    pub manifest: Option<PathBuf>,
}

impl Default for MemoryConfig {
    fn default() -> Self {
        Self {
            kind: MemoryKind::None,
            capacity: 40,
            ratio: 0.25,
            manifest: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub registry: ClassRegistry,
    /// Relative paths resolve against the config file's directory. When
    /// absent, the built-in shape taxonomy embeddings are used.
    #[serde(default)]
    pub embeddings_path: Option<PathBuf>,
    pub schedule: ScheduleConfig,
    #[serde(default)]
    pub loss: LossConfig,
    #[serde(default)]
    pub engine: EngineConfig,
    #[serde(default)]
    pub memory: MemoryConfig,
}

impl ExperimentConfig {
    /// The shape taxonomy with `n_base` base classes and increments of
    /// `n_per_step`.
    pub fn shapes(n_base: usize, n_per_step: usize, mode: ProtocolMode) -> Self {
        Self {
            registry: default_taxonomy().0,
            embeddings_path: None,
            schedule: ScheduleConfig {
                n_base,
                n_per_step,
                mode,
                ordering: ClassOrdering::Registry,
            },
            loss: LossConfig::default(),
            engine: EngineConfig::default(),
            memory: MemoryConfig::default(),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg: Self = serde_json::from_str(&text).map_err(|e| Error::parse(path, e))?;
        let dir = path.parent().unwrap_or(Path::new(""));
        for p in [&mut cfg.embeddings_path, &mut cfg.memory.manifest]
            .into_iter()
            .flatten()
        {
            if p.is_relative() {
                *p = dir.join(&*p);
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.loss.validate()?;
        self.engine.arch.validate()?;
        self.engine.base.validate()?;
        self.engine.incremental.validate()?;
        if !(0.0..1.0).contains(&self.memory.ratio) {
            return Err(Error::Invalid(format!(
                "memory ratio must lie in [0, 1), got {}",
                self.memory.ratio
            )));
        }
        if self.memory.kind == MemoryKind::External && self.memory.manifest.is_none() {
            return Err(Error::Invalid("external memory needs a manifest".into()));
        }
        self.schedule().map(|_| ())
    }

    pub fn schedule(&self) -> Result<TaskSchedule> {
        let s = &self.schedule;
        build_schedule(&self.registry, s.n_base, s.n_per_step, s.mode, &s.ordering)
    }

    pub fn embeddings(&self) -> Result<EmbeddingTable> {
        match &self.embeddings_path {
            Some(p) => load_embeddings(p),
            None => Ok(default_taxonomy().1),
        }
    }

    /// Sets every seed of the run from one value.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.engine.base.seed = seed;
        self.engine.incremental.seed = seed;
        self
    }

    /// Hex SHA-256 of the serialized config.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_hash() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        let cfg = ExperimentConfig::shapes(4, 2, ProtocolMode::Overlap);
        cfg.save(&path).unwrap();
        let back = ExperimentConfig::load(&path).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.hash(), cfg.hash());
        assert_eq!(cfg.hash().len(), 64);
        assert_ne!(cfg.clone().with_seed(3).hash(), cfg.hash());
        assert_eq!(cfg.schedule().unwrap().num_tasks(), 3);
    }

    #[test]
    fn minimal_file_takes_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        fs::write(
            &path,
            r#"{"registry": ["bkg", "a", "b", "c"], "embeddings_path": "e.json",
                "schedule": {"n_base": 2, "n_per_step": 1, "mode": "disjoint"}}"#,
        )
        .unwrap();
        let cfg = ExperimentConfig::load(&path).unwrap();
        assert_eq!(cfg.embeddings_path.unwrap(), dir.path().join("e.json"));
        assert_eq!(cfg.loss, LossConfig::default());
        assert_eq!(cfg.memory.kind, MemoryKind::None);
    }

    #[test]
    fn rejects_bad_values() {
        let mut cfg = ExperimentConfig::shapes(4, 2, ProtocolMode::Overlap);
        cfg.memory.ratio = 1.0;
        assert!(cfg.validate().is_err());
        let mut cfg = ExperimentConfig::shapes(4, 3, ProtocolMode::Overlap);
        assert!(cfg.validate().is_err());
        cfg.schedule.n_per_step = 4;
        cfg.memory.kind = MemoryKind::External;
        assert!(cfg.validate().is_err());
    }
}
