use serde::{Deserialize, Serialize};

use super::metrics::{exact, to_f64, Exact};
use crate::error::{Error, Result};
use crate::mitigation::AdapterSet;
use crate::model::{generate_greedy, pick_candidate, score_candidates, Parameters};
use crate::scalar::Scalar;
use crate::synthdata::{EvalMode, NlTag, Sample, SyntheticImage, TaskDataset, TokenId, EOS};

/// Accuracy of one dataset, kept as exact counts.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalResult {
    pub dataset: String,
    /// Task the dataset belongs to for scoring purposes.
    pub task: u8,
    pub mode: EvalMode,
    pub tag: Option<NlTag>,
    pub correct: usize,
    pub count: usize,
}

impl EvalResult {
    pub fn accuracy_exact(&self) -> Exact {
        exact(self.correct, self.count)
    }

    pub fn accuracy(&self) -> f64 {
        to_f64(&self.accuracy_exact())
    }
}

/// What evaluation needs from a model.
pub trait Predictor {
    fn generate(&self, image: Option<&SyntheticImage>, prompt: &[TokenId], max_new: usize) -> Result<Vec<TokenId>>;
    fn score(&self, image: Option<&SyntheticImage>, prompt: &[TokenId], candidates: &[Vec<TokenId>]) -> Result<Vec<f64>>;
}

pub struct ModelPredictor<'a, S> {
    pub params: &'a Parameters<S>,
    pub adapters: Option<&'a AdapterSet<S>>,
}

impl<'a, S> ModelPredictor<'a, S> {
    pub fn new(params: &'a Parameters<S>) -> Self {
        Self { params, adapters: None }
    }
}

impl<S: Scalar> Predictor for ModelPredictor<'_, S> {
    fn generate(&self, image: Option<&SyntheticImage>, prompt: &[TokenId], max_new: usize) -> Result<Vec<TokenId>> {
        generate_greedy(self.params, self.adapters, image, prompt, max_new)
    }

    fn score(&self, image: Option<&SyntheticImage>, prompt: &[TokenId], candidates: &[Vec<TokenId>]) -> Result<Vec<f64>> {
        Ok(score_candidates(self.params, self.adapters, image, prompt, candidates)?
            .into_iter()
            .map(|s| s.to_f64_exact())
            .collect())
    }
}

fn check(dataset: &TaskDataset, mode: EvalMode) -> Result<()> {
    if dataset.mode != mode {
        return Err(Error::InvalidArgument(format!("{} is not scored as {}", dataset.name, mode.name())));
    }
    if dataset.test.is_empty() {
        return Err(Error::InvalidArgument(format!("{} has an empty test split", dataset.name)));
    }
    Ok(())
}

fn result(dataset: &TaskDataset, task: u8, correct: usize) -> EvalResult {
    EvalResult {
        dataset: dataset.name.clone(),
        task,
        mode: dataset.mode,
        tag: dataset.tag,
        correct,
        count: dataset.test.len(),
    }
}

pub fn generative_correct<P: Predictor>(model: &P, s: &Sample) -> Result<bool> {
    let mut out = model.generate(s.image.as_ref(), &s.prompt, s.target.len())?;
    if let Some(p) = out.iter().position(|&t| t == EOS) {
        out.truncate(p + 1);
    }
    Ok(out == s.target)
}

/// Exact match of the greedy continuation (at most `|target|` tokens,
/// truncated after EOS) against the target.
pub fn accuracy_generative<P: Predictor>(model: &P, dataset: &TaskDataset, task: u8) -> Result<EvalResult> {
    check(dataset, EvalMode::GenerativeExactMatch)?;
    let mut correct = 0;
    for s in &dataset.test {
        correct += generative_correct(model, s)? as usize;
    }
    Ok(result(dataset, task, correct))
}

pub fn accuracy_multichoice<P: Predictor>(model: &P, dataset: &TaskDataset, task: u8) -> Result<EvalResult> {
    check(dataset, EvalMode::MultipleChoice)?;
    let mut correct = 0;
    for s in &dataset.test {
        let c = s
            .choices
            .as_ref()
            .ok_or_else(|| Error::InvalidArgument(format!("{} item without candidates", dataset.name)))?;
        let scores = model.score(s.image.as_ref(), &s.prompt, &c.candidates)?;
        correct += (pick_candidate(&scores) == c.correct) as usize;
    }
    Ok(result(dataset, task, correct))
}

pub fn evaluate_dataset<P: Predictor>(model: &P, dataset: &TaskDataset, task: u8) -> Result<EvalResult> {
    match dataset.mode {
        EvalMode::GenerativeExactMatch => accuracy_generative(model, dataset, task),
        EvalMode::MultipleChoice => accuracy_multichoice(model, dataset, task),
    }
}
