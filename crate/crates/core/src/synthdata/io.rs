//! Line-delimited dataset files and the generation manifest.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::dataset::{Choices, EvalMode, NlTag, Sample, TaskDataset, TaskKind};
use super::scene::{SceneSpec, SyntheticImage};
use super::vocab::{TokenId, Vocabulary};
use super::{DataBundle, GeneratorConfig};
use crate::error::{Error, Result};
use crate::hashing::{sha256_hex, Hasher};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Record {
    pub task_id: u8,
    pub kind: TaskKind,
    pub dataset: String,
    pub mode: EvalMode,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tag: Option<NlTag>,
    pub split: String,
    pub prompt_ids: Vec<TokenId>,
    pub target_ids: Vec<TokenId>,
    pub loss_mask: Vec<bool>,
    /// Row-major `P x F`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub patches: Option<Vec<f32>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub patch_shape: Option<[usize; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scene: Option<SceneSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub candidates: Option<Vec<Vec<TokenId>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub answer_index: Option<usize>,
}

impl Record {
    fn from_sample(d: &TaskDataset, split: &str, s: &Sample) -> Self {
        Self {
            task_id: s.task_id,
            kind: d.kind,
            dataset: d.name.clone(),
            mode: d.mode,
            tag: d.tag,
            split: split.into(),
            prompt_ids: s.prompt.clone(),
            target_ids: s.target.clone(),
            loss_mask: s.loss_mask.clone(),
            patches: s.image.as_ref().map(|im| im.data.clone()),
            patch_shape: s.image.as_ref().map(|im| [im.patches, im.features]),
            scene: s.image.as_ref().map(|im| im.scene.clone()),
            candidates: s.choices.as_ref().map(|c| c.candidates.clone()),
            answer_index: s.choices.as_ref().map(|c| c.correct),
        }
    }

    fn into_sample(self) -> Result<Sample> {
        let image = match (self.patches, self.patch_shape) {
            (Some(data), Some([p, f])) => {
                if data.len() != p * f {
                    return Err(Error::format("dataset record", "patch data does not match its shape"));
                }
                let scene = self.scene.unwrap_or(SceneSpec { objects: Vec::new(), glyph: None });
                Some(SyntheticImage { patches: p, features: f, data, scene })
            }
            (None, None) => None,
            _ => return Err(Error::format("dataset record", "patches without shape")),
        };
        let choices = match (self.candidates, self.answer_index) {
            (Some(candidates), Some(correct)) => Some(Choices { candidates, correct }),
            (None, None) => None,
            _ => return Err(Error::format("dataset record", "candidates without answer index")),
        };
        Ok(Sample {
            task_id: self.task_id,
            image,
            prompt: self.prompt_ids,
            target: self.target_ids,
            loss_mask: self.loss_mask,
            choices,
        })
    }
}

pub fn dataset_lines(d: &TaskDataset) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    for (split, samples) in [("train", &d.train), ("test", &d.test), ("align", &d.alignment)] {
        for s in samples {
            serde_json::to_writer(&mut out, &Record::from_sample(d, split, s))
                .map_err(|e| Error::format("dataset record", e))?;
            out.push(b'\n');
        }
    }
    Ok(out)
}

pub fn write_dataset(path: &Path, d: &TaskDataset) -> Result<String> {
    let bytes = dataset_lines(d)?;
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))?;
    Ok(sha256_hex(&bytes))
}

pub fn read_dataset(path: &Path) -> Result<TaskDataset> {
    let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut d: Option<TaskDataset> = None;
    for line in BufReader::new(f).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: Record = serde_json::from_str(&line).map_err(|e| Error::format("dataset record", e))?;
        let ds = d.get_or_insert_with(|| TaskDataset {
            name: rec.dataset.clone(),
            task_id: rec.task_id,
            kind: rec.kind,
            mode: rec.mode,
            tag: rec.tag,
            train: Vec::new(),
            test: Vec::new(),
            alignment: Vec::new(),
        });
        let split = rec.split.clone();
        let sample = rec.into_sample()?;
        match split.as_str() {
            "train" => ds.train.push(sample),
            "test" => ds.test.push(sample),
            "align" => ds.alignment.push(sample),
            other => return Err(Error::format("dataset record", format!("unknown split {other:?}"))),
        }
    }
    d.ok_or_else(|| Error::format("dataset file", format!("{} is empty", path.display())))
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileEntry {
    pub name: String,
    pub sha256: String,
    pub train: usize,
    pub test: usize,
    pub alignment: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataManifest {
    pub generator: GeneratorConfig,
    pub seed: u64,
    /// Hash of `(generator, seed)`; what downstream artifacts pin.
    pub config_hash: String,
    pub files: Vec<FileEntry>,
    /// Hash over every file hash in order.
    pub content_hash: String,
}

pub const MANIFEST_FILE: &str = "manifest.json";
pub const VOCAB_FILE: &str = "vocab.json";

fn file_name(d: &TaskDataset) -> String {
    format!("{}.jsonl", d.name)
}

pub fn write_bundle(dir: &Path, bundle: &DataBundle) -> Result<DataManifest> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let vocab_path = dir.join(VOCAB_FILE);
    let vocab_bytes = serde_json::to_vec_pretty(&bundle.vocab).map_err(|e| Error::format("vocabulary", e))?;
    fs::write(&vocab_path, &vocab_bytes).map_err(|e| Error::io(&vocab_path, e))?;

    let mut files = Vec::new();
    let mut content = Hasher::new();
    content.update(sha256_hex(&vocab_bytes).as_bytes());
    for d in bundle.datasets() {
        let name = file_name(d);
        let sha = write_dataset(&dir.join(&name), d)?;
        content.update(sha.as_bytes());
        files.push(FileEntry {
            name,
            sha256: sha,
            train: d.train.len(),
            test: d.test.len(),
            alignment: d.alignment.len(),
        });
    }
    let manifest = DataManifest {
        generator: bundle.config.clone(),
        seed: bundle.seed,
        config_hash: bundle.config.hash(bundle.seed),
        files,
        content_hash: content.finish_hex(),
    };
    let path = dir.join(MANIFEST_FILE);
    let bytes = serde_json::to_vec_pretty(&manifest).map_err(|e| Error::format("manifest", e))?;
    fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<DataManifest> {
    let path = dir.join(MANIFEST_FILE);
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::from_slice(&bytes).map_err(|e| Error::format("manifest", e))
}

/// Loads a bundle and verifies every file against the manifest.
pub fn read_bundle(dir: &Path) -> Result<DataBundle> {
    let manifest = read_manifest(dir)?;
    let vocab_path = dir.join(VOCAB_FILE);
    let vocab_bytes = fs::read(&vocab_path).map_err(|e| Error::io(&vocab_path, e))?;
    let vocab: Vocabulary = serde_json::from_slice(&vocab_bytes).map_err(|e| Error::format("vocabulary", e))?;
    let mut by_name = BTreeMap::new();
    for entry in &manifest.files {
        let path = dir.join(&entry.name);
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        if sha256_hex(&bytes) != entry.sha256 {
            return Err(Error::Provenance(format!("{} does not match the manifest hash", entry.name)));
        }
        by_name.insert(entry.name.clone(), read_dataset(&path)?);
    }
    DataBundle::from_parts(manifest.generator, manifest.seed, vocab, by_name.into_values().collect())
}
