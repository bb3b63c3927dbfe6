//! Parameter containers, initialization and trainability.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::ModelConfig;
use crate::error::Result;
use crate::hashing::Hasher;
use crate::rng::{normal, rng_for};
use crate::scalar::Scalar;
use crate::tensor::Matrix;

/// Affine map stored input-major: `y = x · weight + bias`, `weight` is `in x out`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear<S> {
    pub weight: Matrix<S>,
    pub bias: Option<Matrix<S>>,
}

impl<S: Scalar> Linear<S> {
    fn init(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize, std: f64, bias: bool) -> Self {
        let data = (0..fan_in * fan_out).map(|_| normal(rng, std)).collect();
        Self {
            weight: Matrix::from_vec(fan_in, fan_out, data),
            bias: bias.then(|| Matrix::zeros(1, fan_out)),
        }
    }

    pub fn fan_in(&self) -> usize {
        self.weight.rows()
    }

    pub fn fan_out(&self) -> usize {
        self.weight.cols()
    }

    fn zeros_like(&self) -> Self {
        Self { weight: self.weight.zeros_like(), bias: self.bias.as_ref().map(Matrix::zeros_like) }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerNorm<S> {
    pub gain: Matrix<S>,
    pub bias: Matrix<S>,
}

impl<S: Scalar> LayerNorm<S> {
    fn new(d: usize) -> Self {
        Self { gain: Matrix::filled(1, d, S::one()), bias: Matrix::zeros(1, d) }
    }

    fn zeros_like(&self) -> Self {
        Self { gain: self.gain.zeros_like(), bias: self.bias.zeros_like() }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Block<S> {
    pub attn_norm: LayerNorm<S>,
    pub wq: Linear<S>,
    pub wk: Linear<S>,
    pub wv: Linear<S>,
    pub wo: Linear<S>,
    pub ffn_norm: LayerNorm<S>,
    pub ffn_up: Linear<S>,
    pub ffn_down: Linear<S>,
}

/// Linear layers inside a block, in adapter-target order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum BlockLinear {
    Q,
    K,
    V,
    O,
    Up,
    Down,
}

impl BlockLinear {
    pub const ALL: [BlockLinear; 6] =
        [BlockLinear::Q, BlockLinear::K, BlockLinear::V, BlockLinear::O, BlockLinear::Up, BlockLinear::Down];

    pub fn name(self) -> &'static str {
        match self {
            BlockLinear::Q => "attn.wq",
            BlockLinear::K => "attn.wk",
            BlockLinear::V => "attn.wv",
            BlockLinear::O => "attn.wo",
            BlockLinear::Up => "ffn.up",
            BlockLinear::Down => "ffn.down",
        }
    }
}

/// Addresses one LLM linear layer; the targets LoRA may adapt.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum LinearSlot {
    Block(usize, BlockLinear),
    LmHead,
}

impl LinearSlot {
    pub fn name(self) -> String {
        match self {
            LinearSlot::Block(i, l) => format!("blocks.{i}.{}", l.name()),
            LinearSlot::LmHead => "lm_head".into(),
        }
    }
}

impl<S: Scalar> Block<S> {
    pub fn linear(&self, which: BlockLinear) -> &Linear<S> {
        match which {
            BlockLinear::Q => &self.wq,
            BlockLinear::K => &self.wk,
            BlockLinear::V => &self.wv,
            BlockLinear::O => &self.wo,
            BlockLinear::Up => &self.ffn_up,
            BlockLinear::Down => &self.ffn_down,
        }
    }

    pub fn linear_mut(&mut self, which: BlockLinear) -> &mut Linear<S> {
        match which {
            BlockLinear::Q => &mut self.wq,
            BlockLinear::K => &mut self.wk,
            BlockLinear::V => &mut self.wv,
            BlockLinear::O => &mut self.wo,
            BlockLinear::Up => &mut self.ffn_up,
            BlockLinear::Down => &mut self.ffn_down,
        }
    }

    fn zeros_like(&self) -> Self {
        Self {
            attn_norm: self.attn_norm.zeros_like(),
            wq: self.wq.zeros_like(),
            wk: self.wk.zeros_like(),
            wv: self.wv.zeros_like(),
            wo: self.wo.zeros_like(),
            ffn_norm: self.ffn_norm.zeros_like(),
            ffn_up: self.ffn_up.zeros_like(),
            ffn_down: self.ffn_down.zeros_like(),
        }
    }
}

/// Parameter groups that freeze and train together.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Component {
    TokenEmbedding,
    Blocks,
    FinalNorm,
    LmHead,
    VisionEncoder,
    Alignment,
}

impl Component {
    pub const LLM: [Component; 4] =
        [Component::TokenEmbedding, Component::Blocks, Component::FinalNorm, Component::LmHead];

    pub fn is_llm(self) -> bool {
        Self::LLM.contains(&self)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Parameters<S> {
    pub config: ModelConfig,
    pub token_embedding: Matrix<S>,
    pub position_embedding: Matrix<S>,
    pub blocks: Vec<Block<S>>,
    pub final_norm: LayerNorm<S>,
    /// Untied from the token embedding; no bias.
    pub lm_head: Linear<S>,
    /// Frozen `F x vision_dim` map, bias-free.
    pub vision_encoder: Matrix<S>,
    pub align_in: Linear<S>,
    pub align_out: Linear<S>,
}

const EMBED_STD: f64 = 0.3;
const POSITION_STD: f64 = 0.1;

pub fn init_parameters<S: Scalar>(cfg: &ModelConfig, seed: u64) -> Result<Parameters<S>> {
    cfg.validate()?;
    let d = cfg.d_model;
    let mut rng = rng_for(seed, "init.llm");
    let matrix = |rng: &mut ChaCha8Rng, r: usize, c: usize, std: f64| {
        Matrix::from_vec(r, c, (0..r * c).map(|_| normal(rng, std)).collect())
    };
    let token_embedding = matrix(&mut rng, cfg.vocab, d, EMBED_STD);
    let position_embedding = matrix(&mut rng, cfg.context, d, POSITION_STD);
    let inv = |n: usize| 1.0 / (n as f64).sqrt();
    let resid = inv(2 * cfg.layers);
    let blocks = (0..cfg.layers)
        .map(|_| Block {
            attn_norm: LayerNorm::new(d),
            wq: Linear::init(&mut rng, d, d, inv(d), true),
            wk: Linear::init(&mut rng, d, d, inv(d), true),
            wv: Linear::init(&mut rng, d, d, inv(d), true),
            wo: Linear::init(&mut rng, d, d, inv(d) * resid, true),
            ffn_norm: LayerNorm::new(d),
            ffn_up: Linear::init(&mut rng, d, cfg.ffn, inv(d), true),
            ffn_down: Linear::init(&mut rng, cfg.ffn, d, inv(cfg.ffn) * resid, true),
        })
        .collect();
    let final_norm = LayerNorm::new(d);
    let lm_head = Linear::init(&mut rng, d, cfg.vocab, inv(d), false);

    let mut vrng = rng_for(seed, "init.vision");
    let vision_encoder = matrix(&mut vrng, cfg.patch_features, cfg.vision_dim, inv(cfg.patch_features));
    let mut arng = rng_for(seed, "init.alignment");
    let align_in = Linear::init(&mut arng, cfg.vision_dim, d, inv(cfg.vision_dim), true);
    let align_out = Linear::init(&mut arng, d, d, EMBED_STD * inv(d), true);

    Ok(Parameters {
        config: cfg.clone(),
        token_embedding,
        position_embedding,
        blocks,
        final_norm,
        lm_head,
        vision_encoder,
        align_in,
        align_out,
    })
}

impl<S: Scalar> Parameters<S> {
    pub fn zeros_like(&self) -> Self {
        Self {
            config: self.config.clone(),
            token_embedding: self.token_embedding.zeros_like(),
            position_embedding: self.position_embedding.zeros_like(),
            blocks: self.blocks.iter().map(Block::zeros_like).collect(),
            final_norm: self.final_norm.zeros_like(),
            lm_head: self.lm_head.zeros_like(),
            vision_encoder: self.vision_encoder.zeros_like(),
            align_in: self.align_in.zeros_like(),
            align_out: self.align_out.zeros_like(),
        }
    }

    pub fn linear(&self, slot: LinearSlot) -> Option<&Linear<S>> {
        match slot {
            LinearSlot::Block(i, l) => self.blocks.get(i).map(|b| b.linear(l)),
            LinearSlot::LmHead => Some(&self.lm_head),
        }
    }

    pub fn linear_mut(&mut self, slot: LinearSlot) -> Option<&mut Linear<S>> {
        match slot {
            LinearSlot::Block(i, l) => self.blocks.get_mut(i).map(|b| b.linear_mut(l)),
            LinearSlot::LmHead => Some(&mut self.lm_head),
        }
    }

    /// Visits every tensor with its dotted name, in a fixed order.
    pub fn visit<'a>(&'a self, f: &mut dyn FnMut(&str, Component, &'a Matrix<S>)) {
        use Component::*;
        f("token_embedding", TokenEmbedding, &self.token_embedding);
        f("position_embedding", TokenEmbedding, &self.position_embedding);
        for (i, b) in self.blocks.iter().enumerate() {
            f(&format!("blocks.{i}.attn_norm.gain"), Blocks, &b.attn_norm.gain);
            f(&format!("blocks.{i}.attn_norm.bias"), Blocks, &b.attn_norm.bias);
            for l in BlockLinear::ALL {
                let lin = b.linear(l);
                f(&format!("blocks.{i}.{}.weight", l.name()), Blocks, &lin.weight);
                if let Some(bias) = &lin.bias {
                    f(&format!("blocks.{i}.{}.bias", l.name()), Blocks, bias);
                }
            }
            f(&format!("blocks.{i}.ffn_norm.gain"), Blocks, &b.ffn_norm.gain);
            f(&format!("blocks.{i}.ffn_norm.bias"), Blocks, &b.ffn_norm.bias);
        }
        f("final_norm.gain", FinalNorm, &self.final_norm.gain);
        f("final_norm.bias", FinalNorm, &self.final_norm.bias);
        f("lm_head.weight", LmHead, &self.lm_head.weight);
        f("vision_encoder.weight", VisionEncoder, &self.vision_encoder);
        for (name, lin) in [("align_in", &self.align_in), ("align_out", &self.align_out)] {
            f(&format!("alignment.{name}.weight"), Alignment, &lin.weight);
            if let Some(bias) = &lin.bias {
                f(&format!("alignment.{name}.bias"), Alignment, bias);
            }
        }
    }

    /// Mutable counterpart of [`Parameters::visit`], same order.
    pub fn visit_mut(&mut self, f: &mut dyn FnMut(&str, Component, &mut Matrix<S>)) {
        use Component::*;
        f("token_embedding", TokenEmbedding, &mut self.token_embedding);
        f("position_embedding", TokenEmbedding, &mut self.position_embedding);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            f(&format!("blocks.{i}.attn_norm.gain"), Blocks, &mut b.attn_norm.gain);
            f(&format!("blocks.{i}.attn_norm.bias"), Blocks, &mut b.attn_norm.bias);
            for l in BlockLinear::ALL {
                let lin = b.linear_mut(l);
                f(&format!("blocks.{i}.{}.weight", l.name()), Blocks, &mut lin.weight);
                if let Some(bias) = &mut lin.bias {
                    f(&format!("blocks.{i}.{}.bias", l.name()), Blocks, bias);
                }
            }
            f(&format!("blocks.{i}.ffn_norm.gain"), Blocks, &mut b.ffn_norm.gain);
            f(&format!("blocks.{i}.ffn_norm.bias"), Blocks, &mut b.ffn_norm.bias);
        }
        f("final_norm.gain", FinalNorm, &mut self.final_norm.gain);
        f("final_norm.bias", FinalNorm, &mut self.final_norm.bias);
        f("lm_head.weight", LmHead, &mut self.lm_head.weight);
        f("vision_encoder.weight", VisionEncoder, &mut self.vision_encoder);
        for (name, lin) in [("align_in", &mut self.align_in), ("align_out", &mut self.align_out)] {
            f(&format!("alignment.{name}.weight"), Alignment, &mut lin.weight);
            if let Some(bias) = &mut lin.bias {
                f(&format!("alignment.{name}.bias"), Alignment, bias);
            }
        }
    }

    pub fn names(&self) -> Vec<(String, Component)> {
        let mut out = Vec::new();
        self.visit(&mut |n, c, _| out.push((n.to_string(), c)));
        out
    }

    pub fn count(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |_, _, t| n += t.as_slice().len());
        n
    }

    pub fn is_finite(&self) -> bool {
        let mut ok = true;
        self.visit(&mut |_, _, t| ok &= t.is_finite());
        ok
    }

    /// Bit-level fingerprint of every tensor in the given components.
    pub fn fingerprint(&self, components: &[Component]) -> String {
        let mut h = Hasher::new();
        self.visit(&mut |name, c, t| {
            if components.contains(&c) {
                h.update(name.as_bytes());
                for v in t.as_slice() {
                    h.update(&v.bits().to_le_bytes());
                }
            }
        });
        h.finish_hex()
    }
}

/// Which components receive gradients. The vision encoder has no switch:
/// it is frozen under every mask.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainabilityMask {
    pub token_embedding: bool,
    pub blocks: bool,
    pub final_norm: bool,
    pub lm_head: bool,
    pub alignment: bool,
    /// LoRA adapters, when attached.
    pub adapters: bool,
}

impl TrainabilityMask {
    /// Alignment stage: only the projector learns.
    pub fn alignment_stage() -> Self {
        Self { token_embedding: false, blocks: false, final_norm: false, lm_head: false, alignment: true, adapters: false }
    }

    /// Fine-tuning stage: LLM and projector learn.
    pub fn fine_tuning() -> Self {
        Self { token_embedding: true, blocks: true, final_norm: true, lm_head: true, alignment: true, adapters: false }
    }

    /// Fine-tuning with active adapters: base LLM frozen.
    pub fn lora() -> Self {
        Self { token_embedding: false, blocks: false, final_norm: false, lm_head: false, alignment: true, adapters: true }
    }

    /// Text-only pretraining of the base LLM.
    pub fn pretraining() -> Self {
        Self { alignment: false, ..Self::fine_tuning() }
    }

    pub fn trains(&self, c: Component) -> bool {
        match c {
            Component::TokenEmbedding => self.token_embedding,
            Component::Blocks => self.blocks,
            Component::FinalNorm => self.final_norm,
            Component::LmHead => self.lm_head,
            Component::Alignment => self.alignment,
            Component::VisionEncoder => false,
        }
    }

    pub fn trains_llm(&self) -> bool {
        Component::LLM.iter().any(|&c| self.trains(c))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_deterministic_and_finite() {
        let cfg = ModelConfig::default();
        let a: Parameters<f32> = init_parameters(&cfg, 5).unwrap();
        let b: Parameters<f32> = init_parameters(&cfg, 5).unwrap();
        assert_eq!(a.fingerprint(&Component::LLM), b.fingerprint(&Component::LLM));
        assert_eq!(a, b);
        assert!(a.is_finite());
        a.visit(&mut |name, _, t| {
            if name.ends_with(".bias") {
                assert!(t.as_slice().iter().all(|&v| v == 0.0), "{name}");
            }
        });
    }

    #[test]
    fn vision_encoder_is_never_trainable() {
        for m in [
            TrainabilityMask::alignment_stage(),
            TrainabilityMask::fine_tuning(),
            TrainabilityMask::lora(),
            TrainabilityMask::pretraining(),
        ] {
            assert!(!m.trains(Component::VisionEncoder));
        }
        let align = TrainabilityMask::alignment_stage();
        assert!(!align.trains_llm() && align.trains(Component::Alignment));
    }

    #[test]
    fn names_are_unique() {
        let p: Parameters<f64> = init_parameters(&ModelConfig::default(), 1).unwrap();
        let names = p.names();
        let uniq: std::collections::HashSet<_> = names.iter().map(|(n, _)| n).collect();
        assert_eq!(uniq.len(), names.len());
    }

    #[test]
    fn invalid_config_rejected() {
        let cfg = ModelConfig { heads: 5, ..ModelConfig::default() };
        assert!(init_parameters::<f32>(&cfg, 0).is_err());
        let cfg = ModelConfig { context: 20, ..ModelConfig::default() };
        assert!(cfg.validate().is_err());
    }
}
