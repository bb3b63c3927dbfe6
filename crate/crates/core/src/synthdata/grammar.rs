//! A small probabilistic grammar over the non-special vocabulary, the
//! pretraining corpus drawn from it, and the natural-language evaluation
//! suite that probes its regularities.
//!
//! Sentence shape, with `c` the subject class and `o = (c + 1) mod 4`:
//!
//! ```text
//! DET [ADJ_c] NOUN_c VERB_c DET [ADJ_o] NOUN_o [and VERB_c DET NOUN_o] , NOUN_c
//! ```
//!
//! The trailing noun repeats the subject, which makes the final token
//! predictable only from long-range context.

use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::Rng;

use super::dataset::{Choices, EvalMode, NlTag, Sample, TaskDataset, TaskKind};
use super::vocab::{Layout, TokenId, Vocabulary, NUM_CLASSES};
use crate::error::{Error, Result};
use crate::rng::{rng_for, shuffle};

const ADJ_PROB: f64 = 0.5;
const CLAUSE_PROB: f64 = 0.35;
pub const PRETRAIN_TEST_SIZE: usize = 256;
pub const NL_TEST_SIZE: usize = 256;

#[derive(Clone, Debug, PartialEq)]
pub struct Sentence {
    pub tokens: Vec<TokenId>,
    pub class: usize,
    pub subject: TokenId,
    pub object: TokenId,
}

fn object_class(c: usize) -> usize {
    (c + 1) % NUM_CLASSES
}

fn pick<R: Rng>(rng: &mut R, v: &[TokenId]) -> TokenId {
    *v.choose(rng).expect("non-empty word class")
}

/// Noun phrase `DET [ADJ_c] NOUN_c`; returns the noun.
fn noun_phrase<R: Rng>(rng: &mut R, l: &Layout, class: usize, adj: bool, out: &mut Vec<TokenId>) -> TokenId {
    out.push(pick(rng, &l.determiners));
    if adj {
        out.push(pick(rng, &l.adjectives[class]));
    }
    let n = pick(rng, &l.nouns[class]);
    out.push(n);
    n
}

pub fn sample_sentence<R: Rng>(rng: &mut R, l: &Layout) -> Sentence {
    let class = rng.gen_range(0..NUM_CLASSES);
    let oc = object_class(class);
    let mut tokens = Vec::with_capacity(13);
    let subj_adj = rng.gen_bool(ADJ_PROB);
    let subject = noun_phrase(rng, l, class, subj_adj, &mut tokens);
    tokens.push(pick(rng, &l.verbs[class]));
    let obj_adj = rng.gen_bool(ADJ_PROB);
    let object = noun_phrase(rng, l, oc, obj_adj, &mut tokens);
    if rng.gen_bool(CLAUSE_PROB) {
        tokens.push(l.and);
        tokens.push(pick(rng, &l.verbs[class]));
        noun_phrase(rng, l, oc, false, &mut tokens);
    }
    tokens.push(l.comma);
    tokens.push(subject);
    Sentence { tokens, class, subject, object }
}

/// Draws `count` samples from `gen`, skipping any whose hash is in `exclude`.
pub(crate) fn draw_excluding<F>(count: usize, exclude: &HashSet<[u8; 32]>, mut gen: F) -> Result<Vec<Sample>>
where
    F: FnMut() -> Sample,
{
    let mut out = Vec::with_capacity(count);
    let mut attempts = 0usize;
    while out.len() < count {
        attempts += 1;
        if attempts > 50 * count + 1000 {
            return Err(Error::InvalidArgument("sample space too small for a disjoint split".into()));
        }
        let s = gen();
        if !exclude.contains(&s.content_hash()) {
            out.push(s);
        }
    }
    Ok(out)
}

pub(crate) fn hashes(samples: &[Sample]) -> HashSet<[u8; 32]> {
    samples.iter().map(Sample::content_hash).collect()
}

/// Text-only corpus for the base language model (task 1).
pub fn generate_pretrain_corpus(vocab: &Vocabulary, seed: u64, size: usize) -> Result<TaskDataset> {
    if size == 0 {
        return Err(Error::InvalidArgument("pretraining corpus size must be >= 1".into()));
    }
    let l = vocab.layout()?;
    let mut rng = rng_for(seed, "pretrain");
    let mut next = || Sample::text(1, Vec::new(), sample_sentence(&mut rng, l).tokens);
    let test = draw_excluding(PRETRAIN_TEST_SIZE, &HashSet::new(), &mut next)?;
    let train = draw_excluding(size, &hashes(&test), &mut next)?;
    Ok(TaskDataset {
        name: "pretrain".into(),
        task_id: 1,
        kind: TaskKind::Pretrain,
        mode: EvalMode::GenerativeExactMatch,
        tag: None,
        train,
        test,
        alignment: Vec::new(),
    })
}

/// Places the correct candidate among distractors in a shuffled order.
fn choices<R: Rng>(rng: &mut R, correct: TokenId, distractors: Vec<TokenId>) -> Choices {
    let mut all: Vec<TokenId> = std::iter::once(correct).chain(distractors).collect();
    shuffle(&mut all, rng);
    let idx = all.iter().position(|&t| t == correct).expect("correct candidate present");
    Choices { candidates: all.into_iter().map(|t| vec![t]).collect(), correct: idx }
}

/// One word per class from `classes`, excluding `skip` class.
fn one_per_class<R: Rng>(rng: &mut R, words: &[Vec<TokenId>], classes: &[usize]) -> Vec<TokenId> {
    classes.iter().map(|&c| pick(rng, &words[c])).collect()
}

fn other_classes<R: Rng>(rng: &mut R, exclude: &[usize], count: usize) -> Vec<usize> {
    let mut rest: Vec<usize> = (0..NUM_CLASSES).filter(|c| !exclude.contains(c)).collect();
    shuffle(&mut rest, rng);
    rest.truncate(count);
    rest
}

fn mc_sample(prompt: Vec<TokenId>, ch: Choices) -> Sample {
    let target = ch.candidates[ch.correct].clone();
    let loss_mask = vec![true; target.len()];
    Sample { task_id: 1, image: None, prompt, target, loss_mask, choices: Some(ch) }
}

fn nl_dataset(name: &str, tag: NlTag, mode: EvalMode, test: Vec<Sample>) -> TaskDataset {
    TaskDataset {
        name: name.into(),
        task_id: 1,
        kind: TaskKind::NlEval,
        mode,
        tag: Some(tag),
        train: Vec::new(),
        test,
        alignment: Vec::new(),
    }
}

/// Names of the natural-language suite in output order.
pub const NL_SUITE: [(&str, NlTag); 5] = [
    ("cloze", NlTag::Nlg),
    ("agree", NlTag::Nlu),
    ("object", NlTag::Nlu),
    ("adjective", NlTag::Nlu),
    ("clause", NlTag::Nlu),
];

/// Five evaluation sets: one cloze (NLG) and four multiple-choice (NLU).
pub fn generate_nl_eval_suite(vocab: &Vocabulary, seed: u64) -> Result<Vec<TaskDataset>> {
    generate_nl_eval_suite_sized(vocab, seed, NL_TEST_SIZE)
}

pub fn generate_nl_eval_suite_sized(vocab: &Vocabulary, seed: u64, n: usize) -> Result<Vec<TaskDataset>> {
    let l = vocab.layout()?;
    if n == 0 {
        return Err(Error::InvalidArgument("evaluation sets must be non-empty".into()));
    }

    // Final-token cloze: the answer is the repeated subject.
    let mut rng = rng_for(seed, "nl.cloze");
    let cloze: Vec<Sample> = (0..n)
        .map(|_| {
            let s = sample_sentence(&mut rng, l);
            let (last, prompt) = s.tokens.split_last().expect("non-empty sentence");
            Sample::text(1, prompt.to_vec(), vec![*last])
        })
        .collect();

    // Subject-verb agreement, one verb per class.
    let mut rng = rng_for(seed, "nl.agree");
    let agree = (0..n)
        .map(|_| {
            let c = rng.gen_range(0..NUM_CLASSES);
            let mut prompt = Vec::new();
            let adj = rng.gen_bool(ADJ_PROB);
            noun_phrase(&mut rng, l, c, adj, &mut prompt);
            let correct = pick(&mut rng, &l.verbs[c]);
            let others = other_classes(&mut rng, &[c], 3);
            let distractors = one_per_class(&mut rng, &l.verbs, &others);
            let ch = choices(&mut rng, correct, distractors);
            mc_sample(prompt, ch)
        })
        .collect();

    // Object class after a verb.
    let mut rng = rng_for(seed, "nl.object");
    let object = (0..n)
        .map(|_| {
            let c = rng.gen_range(0..NUM_CLASSES);
            let mut prompt = Vec::new();
            let adj = rng.gen_bool(ADJ_PROB);
            noun_phrase(&mut rng, l, c, adj, &mut prompt);
            prompt.push(pick(&mut rng, &l.verbs[c]));
            prompt.push(pick(&mut rng, &l.determiners));
            let oc = object_class(c);
            let correct = pick(&mut rng, &l.nouns[oc]);
            let others = other_classes(&mut rng, &[oc], 3);
            let distractors = one_per_class(&mut rng, &l.nouns, &others);
            let ch = choices(&mut rng, correct, distractors);
            mc_sample(prompt, ch)
        })
        .collect();

    // Adjective-noun agreement, three candidates.
    let mut rng = rng_for(seed, "nl.adjective");
    let adjective = (0..n)
        .map(|_| {
            let c = rng.gen_range(0..NUM_CLASSES);
            let prompt = vec![pick(&mut rng, &l.determiners), pick(&mut rng, &l.adjectives[c])];
            let correct = pick(&mut rng, &l.nouns[c]);
            let others = other_classes(&mut rng, &[c], 2);
            let distractors = one_per_class(&mut rng, &l.nouns, &others);
            let ch = choices(&mut rng, correct, distractors);
            mc_sample(prompt, ch)
        })
        .collect();

    // Second-clause verb agrees with the distant subject, not the nearest noun.
    let mut rng = rng_for(seed, "nl.clause");
    let clause = (0..n)
        .map(|_| {
            let c = rng.gen_range(0..NUM_CLASSES);
            let oc = object_class(c);
            let mut prompt = Vec::new();
            let adj = rng.gen_bool(ADJ_PROB);
            noun_phrase(&mut rng, l, c, adj, &mut prompt);
            prompt.push(pick(&mut rng, &l.verbs[c]));
            let adj = rng.gen_bool(ADJ_PROB);
            noun_phrase(&mut rng, l, oc, adj, &mut prompt);
            prompt.push(l.and);
            let correct = pick(&mut rng, &l.verbs[c]);
            let mut classes = vec![oc];
            classes.extend(other_classes(&mut rng, &[c, oc], 1));
            let distractors = one_per_class(&mut rng, &l.verbs, &classes);
            let ch = choices(&mut rng, correct, distractors);
            mc_sample(prompt, ch)
        })
        .collect();

    Ok(vec![
        nl_dataset("cloze", NlTag::Nlg, EvalMode::GenerativeExactMatch, cloze),
        nl_dataset("agree", NlTag::Nlu, EvalMode::MultipleChoice, agree),
        nl_dataset("object", NlTag::Nlu, EvalMode::MultipleChoice, object),
        nl_dataset("adjective", NlTag::Nlu, EvalMode::MultipleChoice, adjective),
        nl_dataset("clause", NlTag::Nlu, EvalMode::MultipleChoice, clause),
    ])
}
