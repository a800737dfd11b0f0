//! Instruction-controlled multimodal embeddings, trained contrastively at
//! desk scale.
//!
//! The crate contains a small reverse-mode tensor core, a transformer-style
//! encoder with a residual SELU projection head and LoRA adapters, the
//! mined-negative contrastive objective, negative mining, a synthetic
//! aspect-structured corpus, batch construction, a two-stage trainer with
//! temperature experiments, and retrieval / classification / instruction
//! controlled evaluation.
//!
//! Numeric modules are generic over [`Real`]; the aliases below pin the
//! precisions used in practice (`f64` for training, `f32` for storage).

pub mod batching;
pub mod checkpoint;
pub mod corpus;
pub mod encoder;
pub mod eval;
pub mod gradcheck;
pub mod graph;
pub mod hashing;
pub mod jsonl;
pub mod mining;
pub mod objective;
pub mod rng;
pub mod scalar;
pub mod tensor;
pub mod trainer;

pub use scalar::Real;
pub use tensor::TensorError;

pub type Tensor64 = tensor::Tensor<f64>;
pub type Tensor32 = tensor::Tensor<f32>;
pub type Graph64 = graph::Graph<f64>;
pub type Gradients64 = graph::Gradients<f64>;
pub type EncoderParams64 = encoder::EncoderParams<f64>;
pub type EncoderParams32 = encoder::EncoderParams<f32>;
pub type LoraAdapter64 = encoder::LoraAdapter<f64>;
