//! Uniform rehearsal buffer over past vision-language tasks.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{rng_for, shuffle};
use crate::synthdata::{Sample, TaskDataset};

/// Stored count for a split of `len` samples: `round(fraction · len)`, at least 1.
pub fn buffer_quota(len: usize, fraction: f64) -> usize {
    ((fraction * len as f64).round() as usize).max(1).min(len)
}

/// Uniform sample without replacement from the task's train split.
pub fn rehearsal_select(dataset: &TaskDataset, fraction: f64, seed: u64) -> Result<Vec<Sample>> {
    if dataset.task_id < 2 {
        return Err(Error::RehearsalTaskOne);
    }
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Config(format!("rehearsal fraction {fraction} outside (0, 1]")));
    }
    let n = dataset.train.len();
    if n == 0 {
        return Ok(Vec::new());
    }
    let k = buffer_quota(n, fraction);
    let mut rng = rng_for(seed, &format!("rehearsal.{}", dataset.task_id));
    let mut idx: Vec<usize> = (0..n).collect();
    for i in 0..k {
        let j = rng.gen_range(i..n);
        idx.swap(i, j);
    }
    let mut chosen = idx[..k].to_vec();
    chosen.sort_unstable();
    Ok(chosen.into_iter().map(|i| dataset.train[i].clone()).collect())
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RehearsalBuffer {
    pub fraction: f64,
    /// Stored samples per task id.
    pub stores: BTreeMap<u8, Vec<Sample>>,
}

impl RehearsalBuffer {
    pub fn new(fraction: f64) -> Self {
        Self { fraction, stores: BTreeMap::new() }
    }

    /// Adds a subset of the task's train split; a task is stored once.
    pub fn extend(&mut self, dataset: &TaskDataset, seed: u64) -> Result<()> {
        let picked = rehearsal_select(dataset, self.fraction, seed)?;
        self.stores.entry(dataset.task_id).or_insert(picked);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.stores.values().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn task_ids(&self) -> Vec<u8> {
        self.stores.keys().copied().collect()
    }
}

/// Current split plus every buffered sample, shuffled deterministically.
pub fn rehearsal_mix(current: &[Sample], buffer: &RehearsalBuffer, seed: u64) -> Vec<Sample> {
    let mut stream: Vec<Sample> = current.to_vec();
    for samples in buffer.stores.values() {
        stream.extend(samples.iter().cloned());
    }
    shuffle(&mut stream, &mut rng_for(seed, "rehearsal.mix"));
    stream
}
