//! Decoder-only transformer (RMS-norm, rotary positions, causal attention)
//! that can consume an injected KV prefix or an embedding prefix.
//!
//! The same frozen weights play both roles of the compression scheme: the
//! *encoder* (with LoRA adapters attached) and the *decoder* (bare). Base
//! weights are never trainable outside explicit base-LM fitting.

mod forward;
mod kv_cache;

pub use forward::{
    attended_pair_count, causal_attention, forward_with_prefix, greedy_decode, greedy_decode_with,
    rope_apply, ForwardResult, Prefix,
};
pub(crate) use forward::{
    build_forward, forward_embed_rows_then_rows, greedy_continue, InputSegment, ModelVars,
};
#[cfg(test)]
pub(crate) use forward::forward_oracle_tokens_then_rows;
pub use kv_cache::KVCache;

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::numerics::{Real, Tensor};
use crate::{Error, Result};

/// Architecture hyperparameters plus the special-token id map.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub ffn_dim: usize,
    pub max_positions: usize,
    pub rope_theta: f64,
    /// Maximum number of compressed tokens any adapter set may use.
    pub k_max: usize,
    pub bos_id: u32,
    pub eos_id: u32,
    pub pad_id: u32,
    /// Compressed token c_i has id `compressed_base_id + i`, 0-based.
    pub compressed_base_id: u32,
}

impl Default for ModelConfig {
    /// Desk-scale default: byte vocabulary plus specials, trainable in
    /// minutes on a CPU.
    fn default() -> Self {
        ModelConfig {
            vocab_size: 256 + 3 + 16,
            d_model: 128,
            n_layers: 4,
            n_heads: 4,
            ffn_dim: 512,
            max_positions: 1024,
            rope_theta: 10_000.0,
            k_max: 16,
            bos_id: 256,
            eos_id: 257,
            pad_id: 258,
            compressed_base_id: 259,
        }
    }
}

impl ModelConfig {
    /// Half-width variant used by the faster experiment suites.
    pub fn small() -> Self {
        ModelConfig {
            d_model: 64,
            n_layers: 2,
            n_heads: 2,
            ffn_dim: 256,
            ..ModelConfig::default()
        }
    }

    /// Minimal configuration for finite-difference checks of the full
    /// losses (vocabulary of 16 synthetic ids, not bytes).
    pub fn tiny() -> Self {
        ModelConfig {
            vocab_size: 16,
            d_model: 8,
            n_layers: 1,
            n_heads: 2,
            ffn_dim: 16,
            max_positions: 64,
            rope_theta: 10_000.0,
            k_max: 2,
            bos_id: 10,
            eos_id: 11,
            pad_id: 12,
            compressed_base_id: 13,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// Id of compressed token c_{i+1} (0-based index).
    pub fn compressed_id(&self, i: usize) -> u32 {
        self.compressed_base_id + i as u32
    }

    pub fn is_special_id(&self, id: u32) -> bool {
        id == self.bos_id
            || id == self.eos_id
            || id == self.pad_id
            || (self.compressed_base_id..self.compressed_base_id + self.k_max as u32).contains(&id)
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} must be a positive multiple of n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.head_dim() % 2 != 0 {
            return Err(Error::Config(format!(
                "head_dim {} must be even for rotary positions",
                self.head_dim()
            )));
        }
        if self.n_layers == 0 || self.ffn_dim == 0 || self.max_positions == 0 {
            return Err(Error::Config("layer, ffn and position extents must be positive".into()));
        }
        if self.k_max == 0 {
            return Err(Error::Config("k_max must be at least 1".into()));
        }
        let mut specials = vec![self.bos_id, self.eos_id, self.pad_id];
        for i in 0..self.k_max {
            specials.push(self.compressed_id(i));
        }
        let mut deduped = specials.clone();
        deduped.sort_unstable();
        deduped.dedup();
        if deduped.len() != specials.len() {
            return Err(Error::Config("special token ids must be distinct".into()));
        }
        if specials.iter().any(|&id| id as usize >= self.vocab_size) {
            return Err(Error::Config(format!(
                "special ids must be below vocab_size {}",
                self.vocab_size
            )));
        }
        Ok(())
    }
}

/// Weights of one transformer block. Projection matrices are stored
/// [in × out] so activations multiply on the left.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams<F: Real = f32> {
    pub attn_norm: Tensor<F>,
    pub wq: Tensor<F>,
    pub wk: Tensor<F>,
    pub wv: Tensor<F>,
    pub wo: Tensor<F>,
    pub ffn_norm: Tensor<F>,
    pub w_gate: Tensor<F>,
    pub w_up: Tensor<F>,
    pub w_down: Tensor<F>,
}

/// The frozen base weights Θ_LLM.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<F: Real = f32> {
    pub config: ModelConfig,
    pub token_embedding: Tensor<F>,
    pub layers: Vec<LayerParams<F>>,
    pub final_norm: Tensor<F>,
    pub output_head: Tensor<F>,
}

impl<F: Real> ModelParams<F> {
    pub fn named_tensors(&self) -> Vec<(String, &Tensor<F>)> {
        let mut out: Vec<(String, &Tensor<F>)> =
            vec![("token_embedding".into(), &self.token_embedding)];
        for (i, l) in self.layers.iter().enumerate() {
            out.push((format!("layers.{i}.attn_norm"), &l.attn_norm));
            out.push((format!("layers.{i}.wq"), &l.wq));
            out.push((format!("layers.{i}.wk"), &l.wk));
            out.push((format!("layers.{i}.wv"), &l.wv));
            out.push((format!("layers.{i}.wo"), &l.wo));
            out.push((format!("layers.{i}.ffn_norm"), &l.ffn_norm));
            out.push((format!("layers.{i}.w_gate"), &l.w_gate));
            out.push((format!("layers.{i}.w_up"), &l.w_up));
            out.push((format!("layers.{i}.w_down"), &l.w_down));
        }
        out.push(("final_norm".into(), &self.final_norm));
        out.push(("output_head".into(), &self.output_head));
        out
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor<F>)> {
        let mut out: Vec<(String, &mut Tensor<F>)> =
            vec![("token_embedding".into(), &mut self.token_embedding)];
        for (i, l) in self.layers.iter_mut().enumerate() {
            out.push((format!("layers.{i}.attn_norm"), &mut l.attn_norm));
            out.push((format!("layers.{i}.wq"), &mut l.wq));
            out.push((format!("layers.{i}.wk"), &mut l.wk));
            out.push((format!("layers.{i}.wv"), &mut l.wv));
            out.push((format!("layers.{i}.wo"), &mut l.wo));
            out.push((format!("layers.{i}.ffn_norm"), &mut l.ffn_norm));
            out.push((format!("layers.{i}.w_gate"), &mut l.w_gate));
            out.push((format!("layers.{i}.w_up"), &mut l.w_up));
            out.push((format!("layers.{i}.w_down"), &mut l.w_down));
        }
        out.push(("final_norm".into(), &mut self.final_norm));
        out.push(("output_head".into(), &mut self.output_head));
        out
    }

    pub fn count_params(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.numel()).sum()
    }

    /// True when no base tensor is marked trainable. The decoder contract
    /// depends on this.
    pub fn is_fully_frozen(&self) -> bool {
        self.named_tensors().iter().all(|(_, t)| !t.requires_grad)
    }

    /// Flip trainability of every base tensor (used only for base-LM
    /// fitting, never during compressor training).
    pub fn set_trainable(&mut self, flag: bool) {
        for (_, t) in self.named_tensors_mut() {
            t.requires_grad = flag;
        }
    }

    pub fn cast<G: Real>(&self) -> ModelParams<G> {
        ModelParams {
            config: self.config.clone(),
            token_embedding: self.token_embedding.cast(),
            layers: self
                .layers
                .iter()
                .map(|l| LayerParams {
                    attn_norm: l.attn_norm.cast(),
                    wq: l.wq.cast(),
                    wk: l.wk.cast(),
                    wv: l.wv.cast(),
                    wo: l.wo.cast(),
                    ffn_norm: l.ffn_norm.cast(),
                    w_gate: l.w_gate.cast(),
                    w_up: l.w_up.cast(),
                    w_down: l.w_down.cast(),
                })
                .collect(),
            final_norm: self.final_norm.cast(),
            output_head: self.output_head.cast(),
        }
    }
}

impl ModelParams<f32> {
    /// Fresh Normal(0, 0.02) weights with unit norm scales; deterministic
    /// per seed. All tensors start frozen.
    pub fn random(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let (v, d, ffn) = (config.vocab_size, config.d_model, config.ffn_dim);
        let std = 0.02;
        let layers = (0..config.n_layers)
            .map(|_| LayerParams {
                attn_norm: Tensor::filled(&[d], 1.0),
                wq: Tensor::randn(&[d, d], std, &mut rng),
                wk: Tensor::randn(&[d, d], std, &mut rng),
                wv: Tensor::randn(&[d, d], std, &mut rng),
                wo: Tensor::randn(&[d, d], std, &mut rng),
                ffn_norm: Tensor::filled(&[d], 1.0),
                w_gate: Tensor::randn(&[d, ffn], std, &mut rng),
                w_up: Tensor::randn(&[d, ffn], std, &mut rng),
                w_down: Tensor::randn(&[ffn, d], std, &mut rng),
            })
            .collect();
        Ok(ModelParams {
            config: config.clone(),
            token_embedding: Tensor::randn(&[v, d], std, &mut rng),
            layers,
            final_norm: Tensor::filled(&[d], 1.0),
            output_head: Tensor::randn(&[d, v], std, &mut rng),
        })
    }

    /// SHA-256 over the canonical serialization (names, dims, little-endian
    /// data), the freeze-audit fingerprint.
    pub fn sha256_hex(&self) -> String {
        let mut hasher = Sha256::new();
        for (name, t) in self.named_tensors() {
            hasher.update(name.as_bytes());
            hasher.update((t.dims.len() as u32).to_le_bytes());
            for &d in &t.dims {
                hasher.update((d as u32).to_le_bytes());
            }
            hasher.update(t.data_le_bytes());
        }
        hex_string(&hasher.finalize())
    }

    /// Rebuild params from a named tensor table (checkpoint loading).
    pub fn from_named_tensors(
        config: ModelConfig,
        tensors: Vec<(String, Tensor<f32>)>,
    ) -> Result<Self> {
        config.validate()?;
        let mut map: std::collections::HashMap<String, Tensor<f32>> = tensors.into_iter().collect();
        let mut take = |name: String, dims: &[usize]| -> Result<Tensor<f32>> {
            let t = map
                .remove(&name)
                .ok_or_else(|| Error::Format(format!("missing base tensor {name:?}")))?;
            if t.dims != dims {
                return Err(Error::Format(format!(
                    "tensor {name:?} has dims {:?}, expected {dims:?}",
                    t.dims
                )));
            }
            Ok(t)
        };
        let (v, d, ffn) = (config.vocab_size, config.d_model, config.ffn_dim);
        let token_embedding = take("token_embedding".into(), &[v, d])?;
        let mut layers = Vec::with_capacity(config.n_layers);
        for i in 0..config.n_layers {
            layers.push(LayerParams {
                attn_norm: take(format!("layers.{i}.attn_norm"), &[d])?,
                wq: take(format!("layers.{i}.wq"), &[d, d])?,
                wk: take(format!("layers.{i}.wk"), &[d, d])?,
                wv: take(format!("layers.{i}.wv"), &[d, d])?,
                wo: take(format!("layers.{i}.wo"), &[d, d])?,
                ffn_norm: take(format!("layers.{i}.ffn_norm"), &[d])?,
                w_gate: take(format!("layers.{i}.w_gate"), &[d, ffn])?,
                w_up: take(format!("layers.{i}.w_up"), &[d, ffn])?,
                w_down: take(format!("layers.{i}.w_down"), &[ffn, d])?,
            });
        }
        let final_norm = take("final_norm".into(), &[d])?;
        let output_head = take("output_head".into(), &[d, v])?;
        if let Some(name) = map.keys().next() {
            return Err(Error::Format(format!("unexpected base tensor {name:?}")));
        }
        Ok(ModelParams {
            config,
            token_embedding,
            layers,
            final_norm,
            output_head,
        })
    }
}

pub(crate) fn hex_string(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_is_valid() {
        ModelConfig::default().validate().unwrap();
        ModelConfig::small().validate().unwrap();
        ModelConfig::tiny().validate().unwrap();
    }

    #[test]
    fn duplicate_special_ids_rejected() {
        let cfg = ModelConfig {
            eos_id: 256,
            ..ModelConfig::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn special_ids_must_fit_vocab() {
        let cfg = ModelConfig {
            vocab_size: 260,
            ..ModelConfig::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn random_params_are_deterministic_and_frozen() {
        let cfg = ModelConfig::tiny();
        let a = ModelParams::random(&cfg, 3).unwrap();
        let b = ModelParams::random(&cfg, 3).unwrap();
        assert_eq!(a.sha256_hex(), b.sha256_hex());
        assert!(a.is_fully_frozen());
        let c = ModelParams::random(&cfg, 4).unwrap();
        assert_ne!(a.sha256_hex(), c.sha256_hex());
    }

    #[test]
    fn named_round_trip_preserves_hash() {
        let cfg = ModelConfig::tiny();
        let params = ModelParams::random(&cfg, 7).unwrap();
        let named: Vec<(String, Tensor<f32>)> = params
            .named_tensors()
            .into_iter()
            .map(|(n, t)| (n, t.clone()))
            .collect();
        let rebuilt = ModelParams::from_named_tensors(cfg, named).unwrap();
        assert_eq!(params.sha256_hex(), rebuilt.sha256_hex());
    }
}
