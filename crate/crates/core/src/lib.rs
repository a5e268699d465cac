//! Multimodal instruction-tuned decoder, trained from scratch at desk scale.
//!
//! A toy patch encoder feeds a perceiver resampler whose latents condition a
//! causal decoder through tanh-gated cross-attention. After a base pretrain
//! the whole network is frozen and low-rank adapters are trained on a joint
//! mixture of vision-language and language-only instruction data, all
//! rendered through one instruction template with response-only loss.

pub mod chat;
pub mod dataops;
pub mod model;
pub mod numerics;
pub mod templates;
pub mod tokenizer;
pub mod trainer;
