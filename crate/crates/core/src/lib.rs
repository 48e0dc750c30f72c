//! Core of a latent recurrent transformer: a decoder-only language model whose
//! layers additionally read the previous position's source-layer hidden state
//! as a recurrent memory.
//!
//! The crate is `no_std` (it needs `alloc`) and contains everything that is
//! pure computation:
//!
//! - [`tensor`]: dense arrays and a tape-based reverse-mode autodiff graph.
//! - [`backbone`]: the transformer building blocks and the general per-position
//!   forward used by every training and decoding path.
//! - [`lrt`]: memory selection, KV projection with dual gating and residual
//!   injection.
//! - [`trainer`]: interleaved parallel training, chunked training, the exact
//!   sequential unroll, loss bookkeeping and the optimizer.
//! - [`infer`]: KV-cached decoding with the recurrent state handoff.
//! - [`eval`]: bits per byte, centered scores, parameter overhead, compute
//!   accounting.
//! - [`data`]: byte tokenization, corpus splitting, deterministic batching and
//!   synthetic corpora.
//!
//! File formats, configuration files and the command line live in the `lrt`
//! companion crate.

#![no_std]

extern crate alloc;

pub mod backbone;
pub mod config;
pub mod data;
mod error;
pub mod eval;
pub mod infer;
pub mod lrt;
pub mod math;
pub mod params;
pub mod rng;
pub mod tensor;
pub mod trainer;

pub use config::{
    InjectionSet, KvMode, KvParts, LrtConfig, MemorySource, ModelConfig, ProjectionSharing,
    SourceLayer, TargetLayers, WindowKind,
};
pub use error::{Error, Result};
pub use math::Real;
pub use params::{ParamId, ParamKind, ParamStore};
pub use tensor::{Graph, Tensor, Var};
