//! The compression mechanism: run the adapted encoder over the text plus
//! `k` compressed tokens, keep only the compressed positions' per-layer
//! K/V activations (or, for the baseline, their final hidden states), and
//! drive the frozen decoder from that prefix for regeneration and QA.
//!
//! No decoder-side trainable state exists: `regenerate` and `answer` touch
//! only the frozen base params and the context.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::adapters::{AdapterParams, AdapterVars};
use crate::model::{
    build_forward, greedy_decode_with, InputSegment, KVCache, ModelParams, ModelVars, Prefix,
};
use crate::numerics::{Graph, Tensor};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CompressVariant {
    /// Per-layer K/V activations injected into decoder attention.
    Kv,
    /// Final hidden states fed as decoder input embeddings (baseline).
    Embed,
}

impl CompressVariant {
    pub fn as_str(self) -> &'static str {
        match self {
            CompressVariant::Kv => "kv",
            CompressVariant::Embed => "embed",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ContextPayload {
    Kv(KVCache),
    Embed(Tensor),
}

/// The compressed representation of one text.
#[derive(Debug, Clone, PartialEq)]
pub struct CompressedContext {
    pub payload: ContextPayload,
    /// Number of compressed tokens.
    pub k: usize,
    /// Token length of the source text.
    pub source_length: usize,
    /// Decoder-side position bookkeeping: for the KV variant the prefix
    /// occupies absolute positions `offset..offset+k` (offset = source
    /// length, continuing the encoder's geometry); the embedding variant
    /// occupies decoder input slots starting at 0.
    pub position_offset: usize,
}

impl CompressedContext {
    pub fn variant(&self) -> CompressVariant {
        match self.payload {
            ContextPayload::Kv(_) => CompressVariant::Kv,
            ContextPayload::Embed(_) => CompressVariant::Embed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 || self.source_length == 0 {
            return Err(Error::Contract(
                "compressed context needs k ≥ 1 and source_length ≥ 1".into(),
            ));
        }
        match &self.payload {
            ContextPayload::Kv(cache) => {
                if cache.extent() != self.k || !cache.is_aligned() {
                    return Err(Error::Contract(format!(
                        "kv payload extent {} does not match k {}",
                        cache.extent(),
                        self.k
                    )));
                }
            }
            ContextPayload::Embed(rows) => {
                if rows.rank() != 2 || rows.dims[0] != self.k {
                    return Err(Error::Contract(format!(
                        "embed payload dims {:?} do not match k {}",
                        rows.dims, self.k
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Original token count over compressed token count.
pub fn compression_ratio(ctx: &CompressedContext) -> f64 {
    ctx.source_length as f64 / ctx.k as f64
}

pub(crate) fn validate_compress_inputs(
    params: &ModelParams,
    adapters: &AdapterParams,
    text: &[u32],
    k: usize,
) -> Result<()> {
    let config = &params.config;
    let k_max = config.k_max.min(adapters.k_max());
    if k == 0 || k > k_max {
        return Err(Error::Contract(format!("k must be in 1..={k_max}, got {k}")));
    }
    if text.is_empty() {
        return Err(Error::Contract("cannot compress an empty text".into()));
    }
    if let Some(&bad) = text
        .iter()
        .find(|&&id| id as usize >= config.vocab_size || config.is_special_id(id))
    {
        return Err(Error::Contract(format!(
            "text contains special or out-of-vocabulary id {bad}"
        )));
    }
    if text.len() + k > config.max_positions {
        return Err(Error::Capacity(format!(
            "text length {} plus {k} compressed tokens exceeds max_positions {}",
            text.len(),
            config.max_positions
        )));
    }
    Ok(())
}

/// Encode `concat(T, c_1..c_k)` causally through base ⊕ LoRA and return the
/// per-layer K/V at the `k` compressed positions, position offset = |T|.
pub fn compress_kv(
    params: &ModelParams,
    adapters: &AdapterParams,
    text: &[u32],
    k: usize,
) -> Result<CompressedContext> {
    validate_compress_inputs(params, adapters, text, k)?;
    let config = &params.config;
    let l = text.len();
    let mut g = Graph::<f32>::new();
    let mv = ModelVars::insert(&mut g, params);
    let av = AdapterVars::insert(&mut g, adapters);
    let built = build_forward(
        &mut g,
        &mv,
        Some(&av),
        config,
        &[InputSegment::BaseTokens(text), InputSegment::CompressedTokens(k)],
        0,
        None,
        false,
    )?;
    let mut cache = KVCache::new(config.n_layers, config.n_heads, config.head_dim(), l);
    let mut rows = Vec::with_capacity(config.n_layers);
    for (kv, vv) in &built.layer_kv {
        let ks = g.slice_rows(*kv, l, k)?;
        let vs = g.slice_rows(*vv, l, k)?;
        rows.push((g.value(ks).data.clone(), g.value(vs).data.clone()));
    }
    cache.append(&rows)?;
    Ok(CompressedContext {
        payload: ContextPayload::Kv(cache),
        k,
        source_length: l,
        position_offset: l,
    })
}

/// Baseline encoding: same encoder pass, but keep only the final hidden
/// states at the compressed positions. They will occupy the first `k`
/// decoder input slots (positions 0..k).
pub fn compress_embed(
    params: &ModelParams,
    adapters: &AdapterParams,
    text: &[u32],
    k: usize,
) -> Result<CompressedContext> {
    validate_compress_inputs(params, adapters, text, k)?;
    let config = &params.config;
    let l = text.len();
    let mut g = Graph::<f32>::new();
    let mv = ModelVars::insert(&mut g, params);
    let av = AdapterVars::insert(&mut g, adapters);
    let built = build_forward(
        &mut g,
        &mv,
        Some(&av),
        config,
        &[InputSegment::BaseTokens(text), InputSegment::CompressedTokens(k)],
        0,
        None,
        false,
    )?;
    let sliced = g.slice_rows(built.hidden, l, k)?;
    let mut rows = g.value(sliced).clone();
    rows.requires_grad = false;
    rows.grad = None;
    Ok(CompressedContext {
        payload: ContextPayload::Embed(rows),
        k,
        source_length: l,
        position_offset: 0,
    })
}

pub fn compress(
    params: &ModelParams,
    adapters: &AdapterParams,
    text: &[u32],
    k: usize,
    variant: CompressVariant,
) -> Result<CompressedContext> {
    match variant {
        CompressVariant::Kv => compress_kv(params, adapters, text, k),
        CompressVariant::Embed => compress_embed(params, adapters, text, k),
    }
}

/// Greedy-regenerate the compressed text, triggered by [BOS] and stopped by
/// [EOS]. The embedding baseline may substitute its trained trigger row for
/// the [BOS] embedding.
pub fn regenerate(params: &ModelParams, ctx: &CompressedContext, max_len: usize) -> Result<Vec<u32>> {
    regenerate_counted(params, ctx, None, max_len).map(|(ids, _)| ids)
}

/// As [`regenerate`], with an optional trained trigger row (embedding
/// baseline) and the attended-pair count across decode steps.
pub fn regenerate_counted(
    params: &ModelParams,
    ctx: &CompressedContext,
    trigger: Option<&Tensor>,
    max_len: usize,
) -> Result<(Vec<u32>, u64)> {
    ctx.validate()?;
    debug_assert!(params.is_fully_frozen(), "decoder must be frozen");
    let config = &params.config;
    match &ctx.payload {
        ContextPayload::Kv(cache) => greedy_decode_with(
            params,
            None,
            Prefix::Kv(cache),
            &[config.bos_id],
            max_len,
            config.eos_id,
        ),
        ContextPayload::Embed(rows) => match trigger {
            None => greedy_decode_with(
                params,
                None,
                Prefix::Embed(rows),
                &[config.bos_id],
                max_len,
                config.eos_id,
            ),
            Some(t) => {
                let trow = as_row_matrix(t, config.d_model)?;
                let first = crate::model::forward_embed_rows_then_rows(params, rows, &trow)?;
                crate::model::greedy_continue(params, None, first, max_len, config.eos_id)
            }
        },
    }
}

/// Greedy answer given the prefix then the question, per the fine-tuning
/// conditioning order (no instruction template on the compressed path).
pub fn answer(
    params: &ModelParams,
    ctx: &CompressedContext,
    question: &[u32],
    max_len: usize,
) -> Result<Vec<u32>> {
    answer_counted(params, ctx, question, max_len).map(|(ids, _)| ids)
}

pub fn answer_counted(
    params: &ModelParams,
    ctx: &CompressedContext,
    question: &[u32],
    max_len: usize,
) -> Result<(Vec<u32>, u64)> {
    ctx.validate()?;
    debug_assert!(params.is_fully_frozen(), "decoder must be frozen");
    if question.is_empty() {
        return Err(Error::Contract("question must be non-empty".into()));
    }
    let config = &params.config;
    match &ctx.payload {
        ContextPayload::Kv(cache) => greedy_decode_with(
            params,
            None,
            Prefix::Kv(cache),
            question,
            max_len,
            config.eos_id,
        ),
        ContextPayload::Embed(rows) => greedy_decode_with(
            params,
            None,
            Prefix::Embed(rows),
            question,
            max_len,
            config.eos_id,
        ),
    }
}

fn as_row_matrix(t: &Tensor, d: usize) -> Result<Tensor> {
    if t.numel() % d != 0 {
        return Err(Error::Dimension(format!(
            "trigger of {} elements is not a multiple of d_model {d}",
            t.numel()
        )));
    }
    t.clone().reshaped(&[t.numel() / d, d])
}

// ── serialization ────────────────────────────────────────────────────

const CTX_MAGIC: &[u8; 4] = b"KCTX";
const CTX_VERSION: u32 = 1;

fn write_u32<W: Write>(w: &mut W, v: u32) -> Result<()> {
    w.write_all(&v.to_le_bytes())
        .map_err(|e| Error::Format(format!("context write: {e}")))
}

fn write_f32s<W: Write>(w: &mut W, vs: &[f32]) -> Result<()> {
    for v in vs {
        w.write_all(&v.to_le_bytes())
            .map_err(|e| Error::Format(format!("context write: {e}")))?;
    }
    Ok(())
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf)
        .map_err(|e| Error::Format(format!("context truncated reading {what}: {e}")))
}

fn read_u32<R: Read>(r: &mut R, what: &str) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b, what)?;
    Ok(u32::from_le_bytes(b))
}

fn read_f32s<R: Read>(r: &mut R, n: usize, what: &str) -> Result<Vec<f32>> {
    let mut bytes = vec![0u8; n * 4];
    read_exact(r, &mut bytes, what)?;
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

impl CompressedContext {
    /// Container layout: magic, version, variant tag, k, source length,
    /// position offset, then the payload as little-endian 32-bit reals
    /// (per-layer keys then values for the KV variant).
    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        self.validate()?;
        w.write_all(CTX_MAGIC)
            .map_err(|e| Error::Format(format!("context write: {e}")))?;
        write_u32(w, CTX_VERSION)?;
        let tag = match self.payload {
            ContextPayload::Kv(_) => 0u32,
            ContextPayload::Embed(_) => 1u32,
        };
        write_u32(w, tag)?;
        write_u32(w, self.k as u32)?;
        write_u32(w, self.source_length as u32)?;
        write_u32(w, self.position_offset as u32)?;
        match &self.payload {
            ContextPayload::Kv(cache) => {
                write_u32(w, cache.n_layers() as u32)?;
                write_u32(w, cache.n_heads() as u32)?;
                write_u32(w, cache.head_dim() as u32)?;
                for li in 0..cache.n_layers() {
                    write_f32s(w, cache.layer_keys(li))?;
                    write_f32s(w, cache.layer_values(li))?;
                }
            }
            ContextPayload::Embed(rows) => {
                write_u32(w, rows.dims[1] as u32)?;
                write_f32s(w, &rows.data)?;
            }
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<CompressedContext> {
        let mut magic = [0u8; 4];
        read_exact(r, &mut magic, "magic")?;
        if &magic != CTX_MAGIC {
            return Err(Error::Format(format!(
                "bad context magic {magic:?} at offset 0, expected {CTX_MAGIC:?}"
            )));
        }
        let version = read_u32(r, "version")?;
        if version != CTX_VERSION {
            return Err(Error::Format(format!(
                "unsupported context version {version}, expected {CTX_VERSION}"
            )));
        }
        let tag = read_u32(r, "variant tag")?;
        let k = read_u32(r, "k")? as usize;
        let source_length = read_u32(r, "source length")? as usize;
        let position_offset = read_u32(r, "position offset")? as usize;
        let payload = match tag {
            0 => {
                let n_layers = read_u32(r, "layer count")? as usize;
                let n_heads = read_u32(r, "head count")? as usize;
                let head_dim = read_u32(r, "head dim")? as usize;
                let d = n_heads * head_dim;
                let mut cache = KVCache::new(n_layers, n_heads, head_dim, position_offset);
                let mut rows = Vec::with_capacity(n_layers);
                for li in 0..n_layers {
                    let keys = read_f32s(r, k * d, &format!("layer {li} keys"))?;
                    let values = read_f32s(r, k * d, &format!("layer {li} values"))?;
                    rows.push((keys, values));
                }
                cache.append(&rows)?;
                ContextPayload::Kv(cache)
            }
            1 => {
                let d = read_u32(r, "embed width")? as usize;
                let data = read_f32s(r, k * d, "embed rows")?;
                ContextPayload::Embed(Tensor::from_vec(&[k, d], data)?)
            }
            other => return Err(Error::Format(format!("unknown variant tag {other}"))),
        };
        let ctx = CompressedContext {
            payload,
            k,
            source_length,
            position_offset,
        };
        ctx.validate()?;
        Ok(ctx)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut buf = Vec::new();
        self.write_to(&mut buf)?;
        Ok(buf)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<CompressedContext> {
        let mut cursor = bytes;
        Self::read_from(&mut cursor)
    }
}

/// Count attended pairs for answering over the raw, uncompressed context
/// (the comparison target for the counting property).
pub fn full_context_answer_counted(
    params: &ModelParams,
    context: &[u32],
    question: &[u32],
    max_len: usize,
) -> Result<(Vec<u32>, u64)> {
    if question.is_empty() {
        return Err(Error::Contract("question must be non-empty".into()));
    }
    let mut seed = context.to_vec();
    seed.extend_from_slice(question);
    greedy_decode_with(params, None, Prefix::None, &seed, max_len, params.config.eos_id)
}
