//! Task-to-task handoff artifact: parameters, provenance, RNG position and
//! rehearsal buffer in one binary file.
//!
//! Layout: `MMCLCKPT`, u32 version, u64 header length, JSON header, then raw
//! little-endian tensors (parameters in visit order, then optimizer moments).

use std::fs;
use std::path::Path;

use rand::RngCore;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evaluation::EvalResult;
use crate::hashing::sha256_hex;
use crate::mitigation::RehearsalBuffer;
use crate::model::{init_parameters, ModelConfig, Parameters};
use crate::rng::{rng_for, RngState};
use crate::scalar::Scalar;
use crate::tensor::Matrix;
use crate::training::OptimizerState;

const MAGIC: &[u8; 8] = b"MMCLCKPT";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<S> {
    pub params: Parameters<S>,
    /// Hash of the configuration that produced this checkpoint.
    pub config_hash: String,
    pub rng: RngState,
    /// Last fully completed task (1 = pretrained LM).
    pub completed_task: u8,
    pub buffer: RehearsalBuffer,
    /// NL results of the task-1 model, the reference for NL forgetting.
    pub baselines: Vec<EvalResult>,
    /// Only present for mid-stage snapshots.
    pub optimizer: Option<OptimizerState<S>>,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    rows: usize,
    cols: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    dtype: String,
    model: ModelConfig,
    config_hash: String,
    rng: RngState,
    completed_task: u8,
    buffer: RehearsalBuffer,
    baselines: Vec<EvalResult>,
    tensors: Vec<TensorEntry>,
    optimizer: Option<(u64, Vec<TensorEntry>)>,
}

impl<S: Scalar> Checkpoint<S> {
    pub fn new(params: Parameters<S>, config_hash: impl Into<String>, seed: u64) -> Self {
        Self {
            params,
            config_hash: config_hash.into(),
            rng: RngState::capture(&rng_for(seed, "checkpoint")),
            completed_task: 0,
            buffer: RehearsalBuffer::default(),
            baselines: Vec::new(),
            optimizer: None,
        }
    }

    pub fn rng(&self) -> Result<ChaCha8Rng> {
        self.rng.restore().ok_or_else(|| Error::format("rng state", "undecodable"))
    }

    /// Draws a seed from the checkpoint's stream, advancing it.
    pub fn next_seed(&mut self) -> Result<u64> {
        let mut rng = self.rng()?;
        let s = rng.next_u64();
        self.rng = RngState::capture(&rng);
        Ok(s)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut tensors = Vec::new();
        let mut data = Vec::new();
        self.params.visit(&mut |name, _, t| {
            tensors.push(TensorEntry { name: name.to_string(), rows: t.rows(), cols: t.cols() });
            t.as_slice().iter().for_each(|v| v.write_le(&mut data));
        });
        let optimizer = self.optimizer.as_ref().map(|o| {
            let mut entries = Vec::new();
            for (name, m) in &o.first {
                let v = &o.second[name];
                entries.push(TensorEntry { name: name.clone(), rows: m.rows(), cols: m.cols() });
                m.as_slice().iter().chain(v.as_slice()).for_each(|x| x.write_le(&mut data));
            }
            (o.step, entries)
        });
        let header = Header {
            dtype: S::DTYPE.to_string(),
            model: self.params.config.clone(),
            config_hash: self.config_hash.clone(),
            rng: self.rng.clone(),
            completed_task: self.completed_task,
            buffer: self.buffer.clone(),
            baselines: self.baselines.clone(),
            tensors,
            optimizer,
        };
        let json = serde_json::to_vec(&header).map_err(|e| Error::format("checkpoint header", e))?;
        let mut out = Vec::with_capacity(24 + json.len() + data.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&data);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |d: &str| Error::format("checkpoint", d);
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(bad("missing magic"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(bad(&format!("unsupported version {version}")));
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let body = bytes.get(20..20 + hlen).ok_or_else(|| bad("truncated header"))?;
        let header: Header = serde_json::from_slice(body).map_err(|e| Error::format("checkpoint header", e))?;
        if header.dtype != S::DTYPE {
            return Err(Error::Config(format!("checkpoint holds {} tensors, {} requested", header.dtype, S::DTYPE)));
        }
        let mut cursor = 20 + hlen;
        let mut take = |rows: usize, cols: usize| -> Result<Matrix<S>> {
            let n = rows * cols * S::BYTES;
            let raw = bytes.get(cursor..cursor + n).ok_or_else(|| bad("truncated tensor data"))?;
            cursor += n;
            Ok(Matrix::from_vec(rows, cols, raw.chunks_exact(S::BYTES).map(S::read_le).collect()))
        };

        let mut params = init_parameters::<S>(&header.model, 0)?;
        let mut loaded = Vec::with_capacity(header.tensors.len());
        for e in &header.tensors {
            loaded.push((e.name.clone(), take(e.rows, e.cols)?));
        }
        let expected = params.names();
        if expected.len() != loaded.len() || expected.iter().zip(&loaded).any(|((a, _), (b, _))| a != b) {
            return Err(bad("tensor index does not match the model layout"));
        }
        let mut it = loaded.into_iter();
        let mut shape_ok = true;
        params.visit_mut(&mut |_, _, t| {
            let (_, m) = it.next().expect("same length");
            shape_ok &= m.shape() == t.shape();
            *t = m;
        });
        if !shape_ok {
            return Err(bad("tensor shape does not match the model config"));
        }

        let optimizer = match header.optimizer {
            Some((step, entries)) => {
                let mut o = OptimizerState::new();
                o.step = step;
                for e in entries {
                    let m = take(e.rows, e.cols)?;
                    let v = take(e.rows, e.cols)?;
                    o.first.insert(e.name.clone(), m);
                    o.second.insert(e.name, v);
                }
                Some(o)
            }
            None => None,
        };
        if cursor != bytes.len() {
            return Err(bad("trailing bytes"));
        }
        Ok(Self {
            params,
            config_hash: header.config_hash,
            rng: header.rng,
            completed_task: header.completed_task,
            buffer: header.buffer,
            baselines: header.baselines,
            optimizer,
        })
    }

    pub fn save(&self, path: &Path) -> Result<String> {
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, &bytes).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))?;
        Ok(sha256_hex(&bytes))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Loads and checks that the checkpoint came from `config_hash`.
    pub fn load_expecting(path: &Path, config_hash: &str) -> Result<Self> {
        let c = Self::load(path)?;
        if c.config_hash != config_hash {
            return Err(Error::Provenance(format!(
                "{} was produced by config {}, expected {}",
                path.display(),
                c.config_hash,
                config_hash
            )));
        }
        Ok(c)
    }

    pub fn content_hash(&self) -> Result<String> {
        Ok(sha256_hex(&self.to_bytes()?))
    }
}
