//! Prompt compression into the per-layer key/value activations of a handful
//! of special tokens.
//!
//! The library trains a LoRA-adapted copy of a frozen decoder-only
//! transformer (the *encoder*) to squeeze a token sequence into the KV
//! activations of `k` compressed tokens. The unmodified frozen model (the
//! *decoder*) then consumes that KV prefix to regenerate the original text
//! or answer extractive questions about it. An embedding-prefix baseline
//! (final hidden states fed as decoder input embeddings) is included for
//! controlled comparison.
//!
//! Crate layout:
//!
//! - [`numerics`]: dense f32 tensors with reverse-mode autodiff and a
//!   finite-difference gradient oracle.
//! - [`model`]: the frozen transformer (RMS-norm, rotary positions, causal
//!   attention) with KV-cache and prefix injection.
//! - [`adapters`]: the trainable parameter set (LoRA deltas plus
//!   compressed-token embeddings).
//! - [`compressor`]: encode text into a [`compressor::CompressedContext`],
//!   regenerate or answer from it.
//! - [`training`]: regeneration and QA losses, AdamW, the training loop.
//! - [`data`]: byte tokenizer, synthetic corpus and QA generators, batching.
//! - [`metrics`]: ROUGE-L-F, BLEU, QA F1/EM.

pub mod adapters;
pub mod compressor;
pub mod data;
mod error;
pub mod metrics;
pub mod model;
pub mod numerics;
#[cfg(test)]
pub(crate) mod test_support;
pub mod training;

pub use error::{Error, Result};
