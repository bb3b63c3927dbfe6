//! The toy multimodal model: a pre-norm causal transformer LM, a frozen
//! linear vision encoder, and a two-layer GELU alignment projector.

mod config;
mod decode;
mod forward;
mod grad;
mod loss;
mod params;

pub use config::ModelConfig;
pub use decode::{generate_greedy, pick_candidate, score_candidates};
pub use forward::{
    align, assemble_parts, assemble_sequence, backward, encode_image, forward, forward_cached, gelu, gelu_grad,
    Assembled, ForwardCache, Grads,
};
pub use grad::{accumulate_sample, batch_gradients, gradients, mean_loss, GradientMap};
pub use loss::{loss, loss_and_grad};
pub use params::{
    init_parameters, Block, BlockLinear, Component, LayerNorm, Linear, LinearSlot, Parameters, TrainabilityMask,
};
