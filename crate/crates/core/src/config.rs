//! Run configuration: one TOML file per experiment.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::continual::{ExperimentConfig, PretrainConfig, SequenceMode};
use crate::error::{Error, Result};
use crate::hashing::hash_json;
use crate::mitigation::MethodSpec;
use crate::model::ModelConfig;
use crate::synthdata::GeneratorConfig;
use crate::training::StageConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    F32,
    F64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Seeds {
    pub data: u64,
    pub init: u64,
    pub train: u64,
    /// Recorded with every run; greedy evaluation consumes no randomness.
    pub eval: u64,
}

impl Default for Seeds {
    fn default() -> Self {
        Self { data: 0, init: 1, train: 2, eval: 3 }
    }
}

impl Seeds {
    pub fn set(&mut self, key: &str, value: u64) -> Result<()> {
        match key {
            "data" => self.data = value,
            "init" => self.init = value,
            "train" => self.train = value,
            "eval" => self.eval = value,
            other => return Err(Error::Config(format!("unknown seed {other:?}"))),
        }
        Ok(())
    }

    /// Every seed derived from one integer.
    pub fn all(seed: u64) -> Self {
        Self { data: seed, init: seed, train: seed, eval: seed }
    }
}

/// One entry of a sweep: a named method configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepVariant {
    pub name: String,
    pub method: MethodSpec,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub run_id: String,
    pub mode: SequenceMode,
    pub precision: Precision,
    pub out_dir: PathBuf,
    pub seeds: Seeds,
    pub data: GeneratorConfig,
    pub model: ModelConfig,
    pub pretrain: PretrainConfig,
    pub alignment: StageConfig,
    pub fine_tune: StageConfig,
    pub method: MethodSpec,
    pub sweep: Vec<SweepVariant>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            run_id: "default".into(),
            mode: SequenceMode::TwoTask,
            precision: Precision::F32,
            out_dir: PathBuf::from("runs/default"),
            seeds: Seeds::default(),
            data: GeneratorConfig::default(),
            model: ModelConfig::default(),
            pretrain: PretrainConfig::default(),
            alignment: StageConfig::desk_alignment(),
            fine_tune: StageConfig::desk_fine_tune(),
            method: MethodSpec::default(),
            sweep: Vec::new(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.pretrain.validate()?;
        self.alignment.validate()?;
        self.fine_tune.validate()?;
        self.method.validate(self.model.vocab)?;
        for v in &self.sweep {
            v.method.validate(self.model.vocab)?;
        }
        let d = &self.data;
        if d.vocab_size != self.model.vocab || d.patches != self.model.patches || d.patch_features != self.model.patch_features {
            return Err(Error::Config("data and model disagree on vocabulary or image shape".into()));
        }
        if self.run_id.is_empty() || self.run_id.contains(['/', '\\', ',']) {
            return Err(Error::Config(format!("run id {:?} must be a plain name", self.run_id)));
        }
        Ok(())
    }

    pub fn experiment(&self) -> ExperimentConfig {
        ExperimentConfig { alignment: self.alignment.clone(), fine_tune: self.fine_tune.clone(), method: self.method.clone() }
    }

    pub fn data_hash(&self) -> String {
        self.data.hash(self.seeds.data)
    }

    /// Identity of the pretrained base model.
    pub fn base_hash(&self) -> String {
        hash_json(&(self.data_hash(), &self.model, &self.pretrain, self.precision, self.seeds.init, self.seeds.train))
    }

    /// Identity of the whole run; the output location does not count.
    pub fn run_hash(&self) -> String {
        let mut c = self.clone();
        c.out_dir = PathBuf::new();
        c.sweep.clear();
        hash_json(&c)
    }

    pub fn data_dir(&self) -> PathBuf {
        self.out_dir.join("data")
    }

    pub fn base_dir(&self) -> PathBuf {
        self.out_dir.join("base")
    }

    pub fn run_dir(&self) -> PathBuf {
        self.out_dir.join("run").join(&self.run_id)
    }
}
