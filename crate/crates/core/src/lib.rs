//! Lookahead keyframe anchoring for autoregressive video diffusion transformers.
//!
//! The crate is organised around a synthetic audio-driven sprite world so that
//! every stage (data, latent tokens, anchored sequence assembly, training,
//! long rollouts and evaluation) runs on a CPU.
//!
//! - [`synthworld`]: procedural identities, audio tracks, renders and oracle extractors
//! - [`latentspace`]: frame-group latents, patch tokens and factorized positional embeddings
//! - [`anchoring`]: segment plans, anchored sequence assembly and anchor sampling
//! - [`model`]: the tiny audio-conditional diffusion transformer and its flow-matching loss
//! - [`rollout`]: segment-wise Euler sampling, long rollouts and the two-frame probe
//! - [`metrics`]: identity, sync, dynamic degree and sliding-window drift
//! - [`training`]: the optimisation loop and the ablation suite
//! - [`harness`]: distance sweeps, baseline comparisons, manifests and reports

pub mod anchoring;
pub mod error;
pub mod harness;
pub mod latentspace;
pub mod metrics;
pub mod model;
pub mod rollout;
pub mod stats;
pub mod synthworld;
pub mod tensorio;
pub mod training;

pub use error::{Error, Result};
