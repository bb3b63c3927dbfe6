//! Desk-scale continual learning lab for multimodal language models: a toy
//! LLaVA-style model trained through alignment, fine-tuning and a five-task
//! sequence, with forgetting mitigations and exact forgetting metrics.

pub mod checkpoint;
pub mod config;
pub mod continual;
pub mod error;
pub mod evaluation;
pub mod experiment;
pub mod hashing;
pub mod mitigation;
pub mod model;
pub mod rng;
pub mod scalar;
pub mod synthdata;
pub mod tensor;
pub mod training;

pub use error::{Error, ErrorKind, Result};
pub use scalar::Scalar;

pub type Params32 = model::Parameters<f32>;
pub type Params64 = model::Parameters<f64>;
pub type Checkpoint32 = checkpoint::Checkpoint<f32>;
pub type Checkpoint64 = checkpoint::Checkpoint<f64>;
pub type Adapters32 = mitigation::AdapterSet<f32>;
pub type Adapters64 = mitigation::AdapterSet<f64>;
pub type Matrix32 = tensor::Matrix<f32>;
pub type Matrix64 = tensor::Matrix<f64>;
