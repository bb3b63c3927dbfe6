//! The four vision-language tasks of the continual sequence.

use std::collections::HashSet;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::dataset::{EvalMode, Sample, TaskDataset, TaskKind};
use super::grammar::hashes;
use super::scene::{render_scene, RenderConfig, SceneSpec};
use super::vocab::{Layout, TokenId, Vocabulary, IMG};
use crate::error::{Error, Result};
use crate::rng::rng_for;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct VlTaskConfig {
    pub train: usize,
    pub test: usize,
    /// Size of the caption alignment subset (caption task only).
    pub alignment: usize,
    pub render: RenderConfig,
}

impl Default for VlTaskConfig {
    fn default() -> Self {
        Self { train: 2000, test: 256, alignment: 2000, render: RenderConfig::default() }
    }
}

/// Caption tokens: `quadrant color shape` per object, in quadrant order,
/// then the glyph token when the scene has one.
pub fn caption(scene: &SceneSpec, l: &Layout) -> Vec<TokenId> {
    let mut out: Vec<TokenId> = scene
        .sorted_objects()
        .iter()
        .flat_map(|o| [l.quadrants[o.quadrant as usize], l.colors[o.color as usize], l.shapes[o.shape as usize]])
        .collect();
    out.extend(scene.glyph.map(|g| l.glyphs[g as usize]));
    out
}

fn image_sample<R: Rng>(
    rng: &mut R,
    task_id: u8,
    scene: SceneSpec,
    render: &RenderConfig,
    prompt_tail: &[TokenId],
    target: Vec<TokenId>,
) -> Result<Sample> {
    let image = render_scene(&scene, rng.gen(), render)?;
    let mut prompt = vec![IMG];
    prompt.extend_from_slice(prompt_tail);
    let loss_mask = vec![true; target.len()];
    Ok(Sample { task_id, image: Some(image), prompt, target, loss_mask, choices: None })
}

fn vl_sample<R: Rng>(kind: TaskKind, rng: &mut R, l: &Layout, render: &RenderConfig) -> Result<Sample> {
    let id = kind.task_id();
    match kind {
        TaskKind::CaptionInstruct => {
            let scene = SceneSpec::random(rng, 4, false, 0.5);
            let target = caption(&scene, l);
            image_sample(rng, id, scene, render, &[l.describe], target)
        }
        TaskKind::Vqa => {
            let scene = SceneSpec::random(rng, 4, false, 0.5);
            let obj = scene.objects[rng.gen_range(0..scene.objects.len())];
            let q = l.quadrants[obj.quadrant as usize];
            let (attr, answer) = if rng.gen_bool(0.5) {
                (l.color_q, l.colors[obj.color as usize])
            } else {
                (l.shape_q, l.shapes[obj.shape as usize])
            };
            image_sample(rng, id, scene, render, &[l.what, attr, q], vec![answer])
        }
        TaskKind::Ocr => {
            let scene = SceneSpec::random(rng, 4, false, 1.0);
            let glyph = l.glyphs[scene.glyph.expect("ocr scenes carry a glyph") as usize];
            image_sample(rng, id, scene, render, &[l.read], vec![glyph])
        }
        TaskKind::Refgrounding => {
            let scene = SceneSpec::random(rng, 3, true, 0.5);
            let obj = scene.objects[rng.gen_range(0..scene.objects.len())];
            let answer = l.quadrants[obj.quadrant as usize];
            image_sample(rng, id, scene, render, &[l.where_q, l.shapes[obj.shape as usize]], vec![answer])
        }
        other => Err(Error::InvalidArgument(format!("{} is not a vision-language task", other.name()))),
    }
}

pub fn generate_vl_task(kind: TaskKind, vocab: &Vocabulary, seed: u64, size: usize) -> Result<TaskDataset> {
    let cfg = VlTaskConfig { train: size, alignment: size, ..VlTaskConfig::default() };
    generate_vl_task_with(kind, vocab, seed, &cfg)
}

pub fn generate_vl_task_with(kind: TaskKind, vocab: &Vocabulary, seed: u64, cfg: &VlTaskConfig) -> Result<TaskDataset> {
    if !TaskKind::VL.contains(&kind) {
        return Err(Error::InvalidArgument(format!("{} is not a vision-language task", kind.name())));
    }
    if cfg.test == 0 {
        return Err(Error::InvalidArgument("test split must be non-empty".into()));
    }
    cfg.render.validate()?;
    let l = vocab.layout()?;
    let r = &cfg.render;

    let collect = |label: &str, count: usize, exclude: &HashSet<[u8; 32]>| -> Result<Vec<Sample>> {
        let mut rng = rng_for(seed, &format!("{}.{label}", kind.name()));
        let mut out = Vec::with_capacity(count);
        let mut attempts = 0usize;
        while out.len() < count {
            attempts += 1;
            if attempts > 50 * count + 1000 {
                return Err(Error::InvalidArgument("sample space too small for a disjoint split".into()));
            }
            let s = vl_sample(kind, &mut rng, l, r)?;
            if !exclude.contains(&s.content_hash()) {
                out.push(s);
            }
        }
        Ok(out)
    };
    let test = collect("test", cfg.test, &HashSet::new())?;
    let test_hashes = hashes(&test);
    let train = collect("train", cfg.train, &test_hashes)?;

    let alignment = if kind == TaskKind::CaptionInstruct {
        let mut rng = rng_for(seed, "caption_instruct.alignment");
        let mut out = Vec::with_capacity(cfg.alignment);
        while out.len() < cfg.alignment {
            let scene = SceneSpec::random(&mut rng, 4, false, 0.5);
            let target = caption(&scene, l);
            let s = image_sample(&mut rng, 2, scene, r, &[], target)?;
            if !test_hashes.contains(&s.content_hash()) {
                out.push(s);
            }
        }
        out
    } else {
        Vec::new()
    };

    Ok(TaskDataset {
        name: kind.name().into(),
        task_id: kind.task_id(),
        kind,
        mode: EvalMode::GenerativeExactMatch,
        tag: None,
        train,
        test,
        alignment,
    })
}
