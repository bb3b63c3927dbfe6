//! Scenes and their rendering into patch-feature matrices.
//!
//! Patch layout for `P` patches: the first `P - 4` patches are split evenly
//! over the four quadrants, the last four form a glyph strip. Within a
//! quadrant patch the features are `[shape one-hot (3) | color one-hot (4) |
//! presence]`; every glyph-strip patch carries the glyph index as a
//! two-hot code, row `g / 4` in features 0..4 and column `g % 4` in 4..8.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::vocab::{TokenId, Vocabulary, COLORS, NUM_GLYPHS, QUADRANTS, SHAPES};
use crate::error::{Error, Result};
use crate::rng::rng_from;

pub const MIN_FEATURES: usize = 8;
const GLYPH_PATCHES: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SceneObject {
    /// Index into [`SHAPES`].
    pub shape: u8,
    /// Index into [`COLORS`].
    pub color: u8,
    /// Index into [`QUADRANTS`].
    pub quadrant: u8,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SceneSpec {
    pub objects: Vec<SceneObject>,
    /// Index into the vocabulary's glyph tokens.
    pub glyph: Option<u8>,
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        let mut seen = [false; 4];
        for o in &self.objects {
            if o.shape as usize >= SHAPES.len() || o.color as usize >= COLORS.len() {
                return Err(Error::InvalidArgument(format!("scene object out of range: {o:?}")));
            }
            let q = o.quadrant as usize;
            if q >= QUADRANTS.len() || seen[q] {
                return Err(Error::InvalidArgument("at most one object per quadrant".into()));
            }
            seen[q] = true;
        }
        if let Some(g) = self.glyph {
            if g as usize >= NUM_GLYPHS {
                return Err(Error::InvalidArgument(format!("glyph index {g} out of range")));
            }
        }
        Ok(())
    }

    pub fn object_at(&self, quadrant: u8) -> Option<&SceneObject> {
        self.objects.iter().find(|o| o.quadrant == quadrant)
    }

    /// Objects in quadrant order.
    pub fn sorted_objects(&self) -> Vec<SceneObject> {
        let mut v = self.objects.clone();
        v.sort_by_key(|o| o.quadrant);
        v
    }

    pub fn glyph_token(&self, vocab: &Vocabulary) -> Result<Option<TokenId>> {
        let layout = vocab.layout()?;
        Ok(self.glyph.map(|g| layout.glyphs[g as usize]))
    }

    /// Random scene with `1..=max_objects` objects in distinct quadrants.
    /// `distinct_shapes` additionally forbids repeated shapes.
    pub fn random<R: Rng>(rng: &mut R, max_objects: usize, distinct_shapes: bool, glyph_prob: f64) -> Self {
        let max_objects = if distinct_shapes { max_objects.min(SHAPES.len()) } else { max_objects.min(4) };
        let count = rng.gen_range(1..=max_objects);
        let mut quadrants = [0u8, 1, 2, 3];
        crate::rng::shuffle(&mut quadrants, rng);
        let mut shapes = [0u8, 1, 2];
        crate::rng::shuffle(&mut shapes, rng);
        let objects = (0..count)
            .map(|i| SceneObject {
                shape: if distinct_shapes { shapes[i] } else { rng.gen_range(0..SHAPES.len() as u8) },
                color: rng.gen_range(0..COLORS.len() as u8),
                quadrant: quadrants[i],
            })
            .collect();
        let glyph = rng.gen_bool(glyph_prob).then(|| rng.gen_range(0..NUM_GLYPHS as u8));
        Self { objects, glyph }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RenderConfig {
    pub patches: usize,
    pub features: usize,
    /// Bound on the uniform per-feature noise.
    pub noise: f64,
}

impl Default for RenderConfig {
    fn default() -> Self {
        Self { patches: 16, features: 8, noise: 0.05 }
    }
}

impl RenderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patches < 8 || self.patches % 4 != 0 {
            return Err(Error::Config(format!("patch count {} must be a multiple of 4 and >= 8", self.patches)));
        }
        if self.features < MIN_FEATURES {
            return Err(Error::Config(format!("patch features {} < {MIN_FEATURES}", self.features)));
        }
        if !(0.0..1.0).contains(&self.noise) {
            return Err(Error::Config(format!("noise amplitude {} outside [0, 1)", self.noise)));
        }
        Ok(())
    }

    pub fn patches_per_quadrant(&self) -> usize {
        (self.patches - GLYPH_PATCHES) / 4
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticImage {
    pub patches: usize,
    pub features: usize,
    /// Row-major `patches x features`.
    pub data: Vec<f32>,
    pub scene: SceneSpec,
}

impl SyntheticImage {
    pub fn patch(&self, p: usize) -> &[f32] {
        &self.data[p * self.features..(p + 1) * self.features]
    }
}

/// Noise-free feature matrix of a scene.
pub fn clean_features(scene: &SceneSpec, cfg: &RenderConfig) -> Vec<f32> {
    let (p_total, f) = (cfg.patches, cfg.features);
    let ppq = cfg.patches_per_quadrant();
    let mut data = vec![0.0f32; p_total * f];
    for o in &scene.objects {
        for k in 0..ppq {
            let p = o.quadrant as usize * ppq + k;
            let row = &mut data[p * f..(p + 1) * f];
            row[o.shape as usize] = 1.0;
            row[3 + o.color as usize] = 1.0;
            row[7] = 1.0;
        }
    }
    // Two-hot glyph code (row g/4, column g%4), repeated on every glyph patch.
    if let Some(g) = scene.glyph {
        let g = g as usize;
        for p in 4 * ppq..4 * ppq + GLYPH_PATCHES {
            data[p * f + g / 4] = 1.0;
            data[p * f + 4 + g % 4] = 1.0;
        }
    }
    data
}

/// Pure function of `(scene, seed)`.
pub fn render_scene(scene: &SceneSpec, seed: u64, cfg: &RenderConfig) -> Result<SyntheticImage> {
    cfg.validate()?;
    scene.validate()?;
    let mut data = clean_features(scene, cfg);
    let mut rng = rng_from(seed);
    if cfg.noise > 0.0 {
        let amp = cfg.noise as f32;
        for v in data.iter_mut() {
            *v += rng.gen_range(-amp..=amp);
        }
    }
    Ok(SyntheticImage { patches: cfg.patches, features: cfg.features, data, scene: scene.clone() })
}
