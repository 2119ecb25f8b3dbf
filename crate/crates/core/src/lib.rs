//! Action chain-of-thought policies at toy scale.
//!
//! A small bidirectional encoder turns a quantized planar scene and an
//! instruction into per-layer key/value caches. Two reasoners read those
//! caches: the explicit reasoner denoises a coarse reference trajectory and
//! the implicit reasoner pools latent action priors with learnable queries.
//! The action-guided head attends to both and predicts a flow-matching
//! velocity over an action chunk.

pub mod agp;
pub mod backbone;
pub mod ear;
pub mod env;
pub mod error;
pub mod flow;
pub mod harness;
pub mod iar;
pub mod nn;
pub mod policy;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
