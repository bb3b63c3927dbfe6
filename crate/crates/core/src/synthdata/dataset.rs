use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::scene::SyntheticImage;
use super::vocab::{TokenId, IMG};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Pretrain,
    CaptionInstruct,
    Vqa,
    Ocr,
    Refgrounding,
    NlEval,
}

impl TaskKind {
    pub const VL: [TaskKind; 4] =
        [TaskKind::CaptionInstruct, TaskKind::Vqa, TaskKind::Ocr, TaskKind::Refgrounding];

    /// Position in the continual sequence.
    pub fn task_id(self) -> u8 {
        match self {
            TaskKind::Pretrain | TaskKind::NlEval => 1,
            TaskKind::CaptionInstruct => 2,
            TaskKind::Vqa => 3,
            TaskKind::Ocr => 4,
            TaskKind::Refgrounding => 5,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            TaskKind::Pretrain => "pretrain",
            TaskKind::CaptionInstruct => "caption_instruct",
            TaskKind::Vqa => "vqa",
            TaskKind::Ocr => "ocr",
            TaskKind::Refgrounding => "refgrounding",
            TaskKind::NlEval => "nl_eval",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "pretrain" => TaskKind::Pretrain,
            "caption_instruct" => TaskKind::CaptionInstruct,
            "vqa" => TaskKind::Vqa,
            "ocr" => TaskKind::Ocr,
            "refgrounding" => TaskKind::Refgrounding,
            "nl_eval" => TaskKind::NlEval,
            other => return Err(Error::InvalidArgument(format!("unknown task kind {other:?}"))),
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalMode {
    GenerativeExactMatch,
    MultipleChoice,
}

impl EvalMode {
    pub fn name(self) -> &'static str {
        match self {
            EvalMode::GenerativeExactMatch => "generative_exact_match",
            EvalMode::MultipleChoice => "multiple_choice",
        }
    }
}

/// Natural-language split of the evaluation suite.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum NlTag {
    #[serde(rename = "NLU")]
    Nlu,
    #[serde(rename = "NLG")]
    Nlg,
}

impl NlTag {
    pub fn name(self) -> &'static str {
        match self {
            NlTag::Nlu => "NLU",
            NlTag::Nlg => "NLG",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Choices {
    pub candidates: Vec<Vec<TokenId>>,
    pub correct: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub task_id: u8,
    pub image: Option<SyntheticImage>,
    pub prompt: Vec<TokenId>,
    pub target: Vec<TokenId>,
    pub loss_mask: Vec<bool>,
    pub choices: Option<Choices>,
}

impl Sample {
    pub fn text(task_id: u8, prompt: Vec<TokenId>, target: Vec<TokenId>) -> Self {
        let loss_mask = vec![true; target.len()];
        Self { task_id, image: None, prompt, target, loss_mask, choices: None }
    }

    /// Sequence length once BOS is prepended and the image placeholder expands.
    pub fn sequence_len(&self) -> usize {
        let patches = self.image.as_ref().map_or(0, |im| im.patches);
        let placeholders = self.prompt.iter().filter(|&&t| t == IMG).count();
        1 + self.prompt.len() - placeholders + patches + self.target.len()
    }

    pub fn content_hash(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        for t in self.prompt.iter() {
            h.update(t.to_le_bytes());
        }
        h.update(b"|");
        for t in self.target.iter() {
            h.update(t.to_le_bytes());
        }
        if let Some(im) = &self.image {
            h.update(b"|img");
            for v in &im.data {
                h.update(v.to_bits().to_le_bytes());
            }
        }
        if let Some(c) = &self.choices {
            h.update(b"|choices");
            for cand in &c.candidates {
                for t in cand {
                    h.update(t.to_le_bytes());
                }
                h.update(b";");
            }
        }
        h.finalize().into()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskDataset {
    pub name: String,
    pub task_id: u8,
    pub kind: TaskKind,
    pub mode: EvalMode,
    pub tag: Option<NlTag>,
    pub train: Vec<Sample>,
    pub test: Vec<Sample>,
    /// Image-caption pairs consumed only by the alignment stage.
    pub alignment: Vec<Sample>,
}

impl TaskDataset {
    pub fn chance_level(&self) -> f64 {
        match self.mode {
            EvalMode::MultipleChoice => {
                let n = self.test.len().max(1) as f64;
                self.test
                    .iter()
                    .filter_map(|s| s.choices.as_ref())
                    .map(|c| 1.0 / c.candidates.len() as f64)
                    .sum::<f64>()
                    / n
            }
            EvalMode::GenerativeExactMatch => 0.0,
        }
    }
}
