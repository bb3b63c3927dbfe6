//! Deterministic generation of the pretraining corpus, the natural-language
//! evaluation suite, and the vision-language task sequence.

mod dataset;
mod grammar;
pub mod io;
mod scene;
mod tasks;
mod vocab;

pub use dataset::{Choices, EvalMode, NlTag, Sample, TaskDataset, TaskKind};
pub use grammar::{
    generate_nl_eval_suite, generate_nl_eval_suite_sized, generate_pretrain_corpus, sample_sentence, Sentence,
    NL_SUITE, NL_TEST_SIZE, PRETRAIN_TEST_SIZE,
};
pub use scene::{clean_features, render_scene, RenderConfig, SceneObject, SceneSpec, SyntheticImage};
pub use tasks::{caption, generate_vl_task, generate_vl_task_with, VlTaskConfig};
pub use vocab::{
    build_vocabulary, Layout, TokenId, Vocabulary, BOS, COLORS, EOS, IMG, MIN_VOCAB, NUM_CLASSES, NUM_GLYPHS,
    NUM_SPECIAL, PAD, QUADRANTS, SEP, SHAPES,
};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hashing::hash_json;
use crate::rng::derive_seed;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeneratorConfig {
    pub vocab_size: usize,
    pub pretrain_size: usize,
    pub nl_test: usize,
    pub vl_train: usize,
    pub vl_test: usize,
    pub alignment_size: usize,
    pub patches: usize,
    pub patch_features: usize,
    pub noise: f64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            vocab_size: 256,
            pretrain_size: 20_000,
            nl_test: NL_TEST_SIZE,
            vl_train: 2000,
            vl_test: 256,
            alignment_size: 2000,
            patches: 16,
            patch_features: 8,
            noise: 0.05,
        }
    }
}

impl GeneratorConfig {
    pub fn hash(&self, seed: u64) -> String {
        hash_json(&(self, seed))
    }

    pub fn vl(&self) -> VlTaskConfig {
        VlTaskConfig {
            train: self.vl_train,
            test: self.vl_test,
            alignment: self.alignment_size,
            render: RenderConfig { patches: self.patches, features: self.patch_features, noise: self.noise },
        }
    }
}

/// Everything one run consumes, generated from a single data seed.
#[derive(Clone, Debug, PartialEq)]
pub struct DataBundle {
    pub config: GeneratorConfig,
    pub seed: u64,
    pub vocab: Vocabulary,
    pub pretrain: TaskDataset,
    pub nl_suite: Vec<TaskDataset>,
    /// In sequence order: caption_instruct, vqa, ocr, refgrounding.
    pub vl_tasks: Vec<TaskDataset>,
}

impl DataBundle {
    pub fn generate(config: &GeneratorConfig, seed: u64) -> Result<Self> {
        let vocab = build_vocabulary(config.vocab_size, derive_seed(seed, "vocab"))?;
        let pretrain = generate_pretrain_corpus(&vocab, derive_seed(seed, "pretrain"), config.pretrain_size)?;
        let nl_suite = generate_nl_eval_suite_sized(&vocab, derive_seed(seed, "nl"), config.nl_test)?;
        let vl_cfg = config.vl();
        let vl_tasks = TaskKind::VL
            .iter()
            .map(|&k| generate_vl_task_with(k, &vocab, derive_seed(seed, k.name()), &vl_cfg))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { config: config.clone(), seed, vocab, pretrain, nl_suite, vl_tasks })
    }

    pub fn datasets(&self) -> impl Iterator<Item = &TaskDataset> {
        std::iter::once(&self.pretrain).chain(&self.nl_suite).chain(&self.vl_tasks)
    }

    pub fn config_hash(&self) -> String {
        self.config.hash(self.seed)
    }

    pub fn vl_task(&self, kind: TaskKind) -> &TaskDataset {
        self.vl_tasks.iter().find(|d| d.kind == kind).expect("bundle holds every vl task")
    }

    pub(crate) fn from_parts(
        config: GeneratorConfig,
        seed: u64,
        vocab: Vocabulary,
        datasets: Vec<TaskDataset>,
    ) -> Result<Self> {
        let mut pretrain = None;
        let mut nl = Vec::new();
        let mut vl = Vec::new();
        for d in datasets {
            match d.kind {
                TaskKind::Pretrain => pretrain = Some(d),
                TaskKind::NlEval => nl.push(d),
                _ => vl.push(d),
            }
        }
        let order = |name: &str| NL_SUITE.iter().position(|(n, _)| *n == name).unwrap_or(usize::MAX);
        nl.sort_by_key(|d| order(&d.name));
        vl.sort_by_key(|d| d.task_id);
        let pretrain = pretrain.ok_or_else(|| Error::format("dataset bundle", "missing pretraining corpus"))?;
        if nl.len() != NL_SUITE.len() || vl.len() != TaskKind::VL.len() {
            return Err(Error::format("dataset bundle", "incomplete task set"));
        }
        Ok(Self { config, seed, vocab, pretrain, nl_suite: nl, vl_tasks: vl })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> GeneratorConfig {
        GeneratorConfig { pretrain_size: 50, nl_test: 20, vl_train: 30, vl_test: 10, alignment_size: 10, ..Default::default() }
    }

    #[test]
    fn bundle_counts() {
        let b = DataBundle::generate(&small(), 11).unwrap();
        assert_eq!(b.datasets().count(), 10);
        let kinds: Vec<_> = b.vl_tasks.iter().map(|d| d.kind).collect();
        assert_eq!(kinds, TaskKind::VL.to_vec());
    }

    #[test]
    fn bundle_roundtrips_through_files() {
        let dir = tempfile::tempdir().unwrap();
        let b = DataBundle::generate(&small(), 11).unwrap();
        let m1 = io::write_bundle(dir.path(), &b).unwrap();
        let back = io::read_bundle(dir.path()).unwrap();
        assert_eq!(back, b);
        let m2 = io::write_bundle(dir.path(), &back).unwrap();
        assert_eq!(m1.content_hash, m2.content_hash);
    }

    #[test]
    fn tampered_file_detected() {
        let dir = tempfile::tempdir().unwrap();
        let b = DataBundle::generate(&small(), 11).unwrap();
        io::write_bundle(dir.path(), &b).unwrap();
        let p = dir.path().join("vqa.jsonl");
        let mut text = std::fs::read_to_string(&p).unwrap();
        text.push('\n');
        text.push_str(&text.lines().next().unwrap().to_string());
        std::fs::write(&p, text).unwrap();
        assert!(matches!(io::read_bundle(dir.path()), Err(Error::Provenance(_))));
    }

    #[test]
    fn generated_tokens_stay_in_vocabulary() {
        let b = DataBundle::generate(&small(), 12).unwrap();
        let n = b.vocab.size() as TokenId;
        for d in b.datasets() {
            for s in d.train.iter().chain(&d.test).chain(&d.alignment) {
                assert!(s.prompt.iter().chain(&s.target).all(|&t| t < n && t != PAD));
                assert_eq!(s.loss_mask.len(), s.target.len());
            }
        }
    }
}
