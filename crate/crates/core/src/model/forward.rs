//! Transformer forward pass on the autodiff graph, with optional LoRA
//! adapters (encoder role) and optional injected prefixes (decoder role).

use super::kv_cache::KVCache;
use super::{ModelConfig, ModelParams};
use crate::adapters::{lora_linear_apply, AdapterParams, AdapterVars};
use crate::numerics::{Graph, Real, Tensor, Var};
use crate::{Error, Result};

const RMS_EPS: f64 = 1e-5;

/// Graph handles for the inserted base weights.
pub(crate) struct ModelVars {
    pub embed: Var,
    pub layers: Vec<LayerVars>,
    pub final_norm: Var,
    pub head: Var,
}

pub(crate) struct LayerVars {
    pub attn_norm: Var,
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub wo: Var,
    pub ffn_norm: Var,
    pub w_gate: Var,
    pub w_up: Var,
    pub w_down: Var,
}

impl ModelVars {
    /// Vars aligned with `ModelParams::named_tensors` order.
    pub(crate) fn vars_in_named_order(&self) -> Vec<Var> {
        let mut out = vec![self.embed];
        for l in &self.layers {
            out.extend([
                l.attn_norm, l.wq, l.wk, l.wv, l.wo, l.ffn_norm, l.w_gate, l.w_up, l.w_down,
            ]);
        }
        out.push(self.final_norm);
        out.push(self.head);
        out
    }

    pub(crate) fn insert<F: Real>(g: &mut Graph<F>, params: &ModelParams) -> ModelVars {
        ModelVars {
            embed: g.insert(&params.token_embedding),
            layers: params
                .layers
                .iter()
                .map(|l| LayerVars {
                    attn_norm: g.insert(&l.attn_norm),
                    wq: g.insert(&l.wq),
                    wk: g.insert(&l.wk),
                    wv: g.insert(&l.wv),
                    wo: g.insert(&l.wo),
                    ffn_norm: g.insert(&l.ffn_norm),
                    w_gate: g.insert(&l.w_gate),
                    w_up: g.insert(&l.w_up),
                    w_down: g.insert(&l.w_down),
                })
                .collect(),
            final_norm: g.insert(&params.final_norm),
            head: g.insert(&params.output_head),
        }
    }
}

/// A contiguous piece of the input row matrix.
pub(crate) enum InputSegment<'a> {
    /// Ordinary tokens embedded through the frozen base table.
    BaseTokens(&'a [u32]),
    /// The first `k` rows of the adapter's compressed-token table.
    CompressedTokens(usize),
    /// Pre-built embedding rows already on the graph, [r×d].
    Rows(Var),
}

pub(crate) struct BuiltForward {
    /// Final hidden states after the output norm, [t×d].
    pub hidden: Var,
    /// Logits over the full input, [t×V], when requested.
    pub logits: Option<Var>,
    /// Per-layer new (keys, values) rows, keys post-rotary, [t×d].
    pub layer_kv: Vec<(Var, Var)>,
    /// Σ over layers, heads and queries of attended key/value pairs.
    pub attended_pairs: u64,
}

/// Run the layer stack over the concatenated segments. Positions are
/// `first_position..first_position+t`; an injected prefix contributes
/// `extent` extra attended rows visible to every query.
pub(crate) fn build_forward<F: Real>(
    g: &mut Graph<F>,
    mv: &ModelVars,
    av: Option<&AdapterVars>,
    config: &ModelConfig,
    segments: &[InputSegment],
    first_position: usize,
    prefix: Option<(&[(Var, Var)], usize)>,
    want_logits: bool,
) -> Result<BuiltForward> {
    let mut rows: Option<Var> = None;
    for seg in segments {
        let v = match seg {
            InputSegment::BaseTokens(ids) => {
                if let Some(&bad) = ids.iter().find(|&&id| id as usize >= config.vocab_size) {
                    return Err(Error::Index(format!(
                        "token id {bad} out of range for vocab {}",
                        config.vocab_size
                    )));
                }
                g.embed_lookup(mv.embed, ids)?
            }
            InputSegment::CompressedTokens(k) => {
                let av = av.ok_or_else(|| {
                    Error::Contract("compressed tokens need adapters to embed".into())
                })?;
                g.slice_rows(av.compressed_embedding, 0, *k)?
            }
            InputSegment::Rows(v) => *v,
        };
        rows = Some(match rows {
            None => v,
            Some(prev) => g.concat_rows(prev, v)?,
        });
    }
    let x0 = rows.ok_or_else(|| Error::Contract("forward needs at least one input row".into()))?;
    let t = g.value(x0).dims[0];
    if first_position + t > config.max_positions {
        return Err(Error::Capacity(format!(
            "positions {}..{} exceed max_positions {}",
            first_position,
            first_position + t,
            config.max_positions
        )));
    }
    let positions: Vec<usize> = (first_position..first_position + t).collect();
    let (prefix_vars, extent) = match prefix {
        Some((vars, e)) => {
            if vars.len() != config.n_layers {
                return Err(Error::Config(format!(
                    "prefix has {} layers, model has {}",
                    vars.len(),
                    config.n_layers
                )));
            }
            (Some(vars), e)
        }
        None => (None, 0),
    };

    let head_dim = config.head_dim();
    let mut attended: u64 = 0;
    for i in 0..t {
        attended += (extent + i + 1) as u64;
    }
    attended *= (config.n_heads * config.n_layers) as u64;

    let mut x = x0;
    let mut layer_kv = Vec::with_capacity(config.n_layers);
    for (li, lv) in mv.layers.iter().enumerate() {
        let xn = g.rms_norm(x, lv.attn_norm, RMS_EPS)?;
        let lora = av.map(|a| (&a.layers[li], a.alpha, a.rank));
        let project = |g: &mut Graph<F>, w: Var, slot: usize| -> Result<Var> {
            let base = g.matmul(xn, w)?;
            match lora {
                Some((pairs, alpha, rank)) => {
                    let (a, b) = pairs[slot];
                    lora_linear_apply(g, base, xn, a, b, alpha, rank)
                }
                None => Ok(base),
            }
        };
        let q = project(g, lv.wq, 0)?;
        let k = project(g, lv.wk, 1)?;
        let v = project(g, lv.wv, 2)?;
        let q = g.rope(q, head_dim, &positions, config.rope_theta)?;
        let k = g.rope(k, head_dim, &positions, config.rope_theta)?;
        let (k_all, v_all) = match prefix_vars {
            Some(vars) => {
                let (pk, pv) = vars[li];
                (g.concat_rows(pk, k)?, g.concat_rows(pv, v)?)
            }
            None => (k, v),
        };
        let attn = g.attention(q, k_all, v_all, config.n_heads, extent)?;
        let o = {
            let base = g.matmul(attn, lv.wo)?;
            match lora {
                Some((pairs, alpha, rank)) => {
                    let (a, b) = pairs[3];
                    lora_linear_apply(g, base, attn, a, b, alpha, rank)
                }
                None => Ok(base),
            }
        }?;
        x = g.add(x, o)?;
        let xf = g.rms_norm(x, lv.ffn_norm, RMS_EPS)?;
        let gate_lin = g.matmul(xf, lv.w_gate)?;
        let gate = g.silu(gate_lin)?;
        let up = g.matmul(xf, lv.w_up)?;
        let prod = g.mul(gate, up)?;
        let down = g.matmul(prod, lv.w_down)?;
        x = g.add(x, down)?;
        layer_kv.push((k, v));
    }
    let hidden = g.rms_norm(x, mv.final_norm, RMS_EPS)?;
    let logits = if want_logits {
        Some(g.matmul(hidden, mv.head)?)
    } else {
        None
    };
    Ok(BuiltForward {
        hidden,
        logits,
        layer_kv,
        attended_pairs: attended,
    })
}

/// Prefix consumed by the decoder: nothing, injected per-layer KV rows, or
/// embedding rows occupying the first input slots.
pub enum Prefix<'a> {
    None,
    Kv(&'a KVCache),
    Embed(&'a Tensor),
}

/// Output of one forward call.
pub struct ForwardResult {
    /// Logits for the token rows, [t×V].
    pub logits: Tensor,
    /// Cache covering the prefix (when KV) plus all new positions.
    pub cache: KVCache,
    /// Attended key/value pairs summed over layers, heads and queries.
    pub attended_pairs: u64,
}

/// Closed-form attended-pair count for decoding `new_tokens` rows over a
/// prefix of `extent` rows: Σ_{i=1..n}(e+i) per head per layer.
pub fn attended_pair_count(extent: usize, new_tokens: usize, n_heads: usize, n_layers: usize) -> u64 {
    let mut per_head: u64 = 0;
    for i in 1..=new_tokens {
        per_head += (extent + i) as u64;
    }
    per_head * (n_heads * n_layers) as u64
}

pub(crate) enum OwnedSegment<'a> {
    Tokens(&'a [u32]),
    Rows(&'a Tensor),
}

/// f32 forward over explicit segments; shared by the public entry points
/// and the compressor's trigger-row decode path.
pub(crate) fn forward_segments(
    params: &ModelParams,
    adapters: Option<&AdapterParams>,
    segments: &[OwnedSegment],
    prefix_cache: Option<&KVCache>,
    logit_rows: Option<(usize, usize)>,
) -> Result<ForwardResult> {
    let config = &params.config;
    let mut g = Graph::<f32>::new();
    let mv = ModelVars::insert(&mut g, params);
    let av = adapters.map(|a| AdapterVars::insert(&mut g, a));

    let mut prefix_vars: Vec<(Var, Var)> = Vec::new();
    let (prefix, first_position, offset) = match prefix_cache {
        Some(cache) if cache.extent() > 0 => {
            if cache.n_layers() != config.n_layers
                || cache.width() != config.d_model
                || cache.head_dim() != config.head_dim()
            {
                return Err(Error::Config(format!(
                    "cache shape ({} layers, width {}) does not match model ({} layers, width {})",
                    cache.n_layers(),
                    cache.width(),
                    config.n_layers,
                    config.d_model
                )));
            }
            let e = cache.extent();
            let d = config.d_model;
            for li in 0..config.n_layers {
                let k = g.leaf(Tensor::from_vec(&[e, d], cache.layer_keys(li).to_vec())?);
                let v = g.leaf(Tensor::from_vec(&[e, d], cache.layer_values(li).to_vec())?);
                prefix_vars.push((k, v));
            }
            (true, cache.next_position(), cache.position_offset())
        }
        Some(cache) => (false, cache.next_position(), cache.position_offset()),
        None => (false, 0, 0),
    };

    let graph_segments: Vec<InputSegment> = segments
        .iter()
        .map(|s| match s {
            OwnedSegment::Tokens(ids) => Ok(InputSegment::BaseTokens(ids)),
            OwnedSegment::Rows(t) => {
                if t.rank() != 2 || t.dims[1] != config.d_model {
                    return Err(Error::Dimension(format!(
                        "embedding rows must be [k×{}], got {:?}",
                        config.d_model, t.dims
                    )));
                }
                Ok(InputSegment::Rows(g.insert_frozen(t)))
            }
        })
        .collect::<Result<_>>()?;

    let built = build_forward(
        &mut g,
        &mv,
        av.as_ref(),
        config,
        &graph_segments,
        first_position,
        if prefix {
            Some((prefix_vars.as_slice(), prefix_cache.map(KVCache::extent).unwrap_or(0)))
        } else {
            None
        },
        true,
    )?;

    let logits_var = built.logits.expect("logits requested");
    let logits = match logit_rows {
        Some((start, len)) => {
            let sliced = g.slice_rows(logits_var, start, len)?;
            g.value(sliced).clone()
        }
        None => g.value(logits_var).clone(),
    };
    if !logits.is_finite() {
        return Err(Error::NonFinite("forward produced non-finite logits".into()));
    }

    let mut cache = match prefix_cache {
        Some(c) => c.clone(),
        None => KVCache::new(config.n_layers, config.n_heads, config.head_dim(), offset),
    };
    let new_rows: Vec<(Vec<f32>, Vec<f32>)> = built
        .layer_kv
        .iter()
        .map(|(k, v)| (g.value(*k).data.clone(), g.value(*v).data.clone()))
        .collect();
    cache.append(&new_rows)?;

    Ok(ForwardResult {
        logits,
        cache,
        attended_pairs: built.attended_pairs,
    })
}

/// Forward the frozen model (plus adapters, when given, in the encoder
/// role) over `tokens` with an optional prefix. Returns per-token logits,
/// the extended cache, and the attended-pair count.
pub fn forward_with_prefix(
    params: &ModelParams,
    adapters: Option<&AdapterParams>,
    tokens: &[u32],
    prefix: Prefix,
) -> Result<ForwardResult> {
    if tokens.is_empty() {
        return Err(Error::Contract("forward_with_prefix needs at least one token".into()));
    }
    match prefix {
        Prefix::None => {
            forward_segments(params, adapters, &[OwnedSegment::Tokens(tokens)], None, None)
        }
        Prefix::Kv(cache) => {
            forward_segments(params, adapters, &[OwnedSegment::Tokens(tokens)], Some(cache), None)
        }
        Prefix::Embed(rows) => {
            let k = rows.dims.first().copied().unwrap_or(0);
            forward_segments(
                params,
                adapters,
                &[OwnedSegment::Rows(rows), OwnedSegment::Tokens(tokens)],
                None,
                Some((k, tokens.len())),
            )
        }
    }
}

fn argmax_lowest(row: &[f32]) -> u32 {
    let mut best = 0usize;
    let mut best_val = f32::NEG_INFINITY;
    for (i, &v) in row.iter().enumerate() {
        if v > best_val {
            best_val = v;
            best = i;
        }
    }
    best as u32
}

/// Iterated argmax continuation; deterministic, ties break to the lowest
/// token id, halts at `stop_id` or after `max_len` generated tokens.
pub fn greedy_decode(
    params: &ModelParams,
    prefix: Prefix,
    seed_tokens: &[u32],
    max_len: usize,
    stop_id: u32,
) -> Result<Vec<u32>> {
    greedy_decode_with(params, None, prefix, seed_tokens, max_len, stop_id).map(|(ids, _)| ids)
}

/// As [`greedy_decode`], with optional adapters applied to the forward
/// (used by the instructed full-context gold standard) and the attended
/// pair count accumulated across decode steps.
pub fn greedy_decode_with(
    params: &ModelParams,
    adapters: Option<&AdapterParams>,
    prefix: Prefix,
    seed_tokens: &[u32],
    max_len: usize,
    stop_id: u32,
) -> Result<(Vec<u32>, u64)> {
    let first = forward_with_prefix(params, adapters, seed_tokens, prefix)?;
    greedy_continue(params, adapters, first, max_len, stop_id)
}

/// Continue greedy decoding from an already-computed forward state.
pub(crate) fn greedy_continue(
    params: &ModelParams,
    adapters: Option<&AdapterParams>,
    first: ForwardResult,
    max_len: usize,
    stop_id: u32,
) -> Result<(Vec<u32>, u64)> {
    if max_len == 0 {
        return Err(Error::Contract("greedy_decode needs max_len >= 1".into()));
    }
    let mut res = first;
    let mut attended = res.attended_pairs;
    let mut out = Vec::new();
    loop {
        let logits = &res.logits;
        let v = logits.last_dim();
        let last = &logits.data[(logits.rows() - 1) * v..];
        let tok = argmax_lowest(last);
        if tok == stop_id {
            break;
        }
        out.push(tok);
        if out.len() >= max_len {
            break;
        }
        res = forward_with_prefix(params, adapters, &[tok], Prefix::Kv(&res.cache))?;
        attended += res.attended_pairs;
    }
    Ok((out, attended))
}

/// Forward over prefix embedding rows followed by extra rows (the trained
/// trigger of the embedding baseline); logits cover the extra rows.
pub(crate) fn forward_embed_rows_then_rows(
    params: &ModelParams,
    embed: &Tensor,
    extra: &Tensor,
) -> Result<ForwardResult> {
    let k = embed.dims.first().copied().unwrap_or(0);
    let t = extra.dims.first().copied().unwrap_or(0);
    forward_segments(
        params,
        None,
        &[OwnedSegment::Rows(embed), OwnedSegment::Rows(extra)],
        None,
        Some((k, t)),
    )
}

/// Bare-model forward over tokens followed by explicit embedding rows; the
/// oracle for the zero-LoRA encoder equivalence.
#[cfg(test)]
pub(crate) fn forward_oracle_tokens_then_rows(
    params: &ModelParams,
    tokens: &[u32],
    rows: &Tensor,
) -> Result<ForwardResult> {
    forward_segments(
        params,
        None,
        &[OwnedSegment::Tokens(tokens), OwnedSegment::Rows(rows)],
        None,
        None,
    )
}

/// Standard rotary rotation of [t×d] activations (viewed per head) at
/// absolute positions; the spec-level op, independent of any graph.
pub fn rope_apply(
    x: &Tensor,
    n_heads: usize,
    positions: &[usize],
    rope_theta: f64,
    max_positions: usize,
) -> Result<Tensor> {
    if x.rank() != 2 || n_heads == 0 || x.dims[1] % n_heads != 0 {
        return Err(Error::Dimension(format!(
            "rope_apply expects [t×d] with d divisible by n_heads, got {:?} / {n_heads}",
            x.dims
        )));
    }
    let head_dim = x.dims[1] / n_heads;
    if head_dim % 2 != 0 {
        return Err(Error::Dimension(format!("head_dim {head_dim} must be even")));
    }
    if positions.len() != x.dims[0] {
        return Err(Error::Dimension(format!(
            "{} positions for {} rows",
            positions.len(),
            x.dims[0]
        )));
    }
    if let Some(&p) = positions.iter().find(|&&p| p >= max_positions) {
        return Err(Error::Range(format!(
            "position {p} exceeds max_positions {max_positions}"
        )));
    }
    let mut out = x.clone();
    crate::numerics::rope_rotate_public(&mut out.data, x.dims[1], head_dim, positions, rope_theta);
    Ok(out)
}

/// One attention sublayer against a running cache: project, rotate, attend
/// over the cached rows plus the new ones, and append this layer's new
/// keys/values to the cache. Norms and residuals live outside this op.
pub fn causal_attention(
    params: &ModelParams,
    layer: usize,
    x: &Tensor,
    cache: &mut KVCache,
    positions: &[usize],
) -> Result<Tensor> {
    let config = &params.config;
    if layer >= config.n_layers {
        return Err(Error::Config(format!(
            "layer {layer} out of range for {} layers",
            config.n_layers
        )));
    }
    if cache.n_layers() != config.n_layers {
        return Err(Error::Config(format!(
            "cache has {} layers, model has {}",
            cache.n_layers(),
            config.n_layers
        )));
    }
    if x.rank() != 2 || x.dims[1] != config.d_model {
        return Err(Error::Dimension(format!(
            "expected [t×{}] input, got {:?}",
            config.d_model, x.dims
        )));
    }
    if positions.len() != x.dims[0] {
        return Err(Error::Dimension("one position per input row required".into()));
    }
    if positions.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Contract("positions must be strictly increasing".into()));
    }
    if positions.first().is_some_and(|&p| p < cache.next_position()) {
        return Err(Error::Contract(format!(
            "positions must start at or after the cache end {}",
            cache.next_position()
        )));
    }
    if positions.last().is_some_and(|&p| p >= config.max_positions) {
        return Err(Error::Range(format!(
            "position {} exceeds max_positions {}",
            positions.last().unwrap(),
            config.max_positions
        )));
    }

    let lp = &params.layers[layer];
    let mut g = Graph::<f32>::new();
    let xv = g.insert_frozen(x);
    let wq = g.insert_frozen(&lp.wq);
    let wk = g.insert_frozen(&lp.wk);
    let wv = g.insert_frozen(&lp.wv);
    let wo = g.insert_frozen(&lp.wo);
    let q = g.matmul(xv, wq)?;
    let k = g.matmul(xv, wk)?;
    let v = g.matmul(xv, wv)?;
    let head_dim = config.head_dim();
    let q = g.rope(q, head_dim, positions, config.rope_theta)?;
    let k = g.rope(k, head_dim, positions, config.rope_theta)?;
    let extent = cache.layer_extent(layer);
    let (k_all, v_all) = if extent > 0 {
        let d = config.d_model;
        let pk = g.leaf(Tensor::from_vec(&[extent, d], cache.layer_keys(layer).to_vec())?);
        let pv = g.leaf(Tensor::from_vec(&[extent, d], cache.layer_values(layer).to_vec())?);
        (g.concat_rows(pk, k)?, g.concat_rows(pv, v)?)
    } else {
        (k, v)
    };
    let attn = g.attention(q, k_all, v_all, config.n_heads, extent)?;
    let out = g.matmul(attn, wo)?;
    cache.append_layer(layer, &g.value(k).data, &g.value(v).data)?;
    Ok(g.value(out).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapters::init_adapters;
    use crate::model::ModelConfig;
    use crate::test_support::{make_embeddings_constant, probe_hidden, rig_head_towards};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;

    fn wide_config() -> ModelConfig {
        // d=4 keeps hand inspection easy; V=300 exercises byte + specials.
        ModelConfig {
            vocab_size: 300,
            d_model: 4,
            n_layers: 2,
            n_heads: 2,
            ffn_dim: 8,
            max_positions: 64,
            rope_theta: 10_000.0,
            k_max: 4,
            bos_id: 256,
            eos_id: 257,
            pad_id: 258,
            compressed_base_id: 259,
        }
    }

    fn rand_tokens(n: usize, vmax: u32, seed: u64) -> Vec<u32> {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        (0..n).map(|_| rng.gen_range(0..vmax)).collect()
    }

    #[test]
    fn forward_shapes_with_injected_prefix() {
        let cfg = wide_config();
        let params = ModelParams::random(&cfg, 1).unwrap();
        let first = forward_with_prefix(&params, None, &[42], Prefix::None).unwrap();
        assert_eq!(first.cache.extent(), 1);
        let res = forward_with_prefix(&params, None, &[1, 2, 3], Prefix::Kv(&first.cache)).unwrap();
        assert_eq!(res.logits.dims, vec![3, 300]);
        assert_eq!(res.cache.extent(), 4);
    }

    #[test]
    fn kv_injection_matches_unsplit_forward() {
        let cfg = ModelConfig::small();
        let params = ModelParams::random(&cfg, 7).unwrap();
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        for round in 0..5u64 {
            let n = rng.gen_range(4..20usize);
            let tokens = rand_tokens(n, 256, 100 + round);
            let split = rng.gen_range(1..n);
            let full = forward_with_prefix(&params, None, &tokens, Prefix::None).unwrap();
            let head = forward_with_prefix(&params, None, &tokens[..split], Prefix::None).unwrap();
            let tail =
                forward_with_prefix(&params, None, &tokens[split..], Prefix::Kv(&head.cache))
                    .unwrap();
            let v = cfg.vocab_size;
            let want = &full.logits.data[split * v..];
            let got = &tail.logits.data;
            let max_diff = want
                .iter()
                .zip(got.iter())
                .map(|(a, b)| (a - b).abs())
                .fold(0.0f32, f32::max);
            assert!(max_diff <= 1e-5, "round {round}: diff {max_diff}");
        }
    }

    #[test]
    fn zero_lora_adapters_leave_logits_unchanged() {
        let cfg = ModelConfig::small();
        let params = ModelParams::random(&cfg, 9).unwrap();
        let adapters = init_adapters(&cfg, 4, 16.0, 2, true).unwrap();
        let tokens = rand_tokens(12, 256, 5);
        let bare = forward_with_prefix(&params, None, &tokens, Prefix::None).unwrap();
        let adapted = forward_with_prefix(&params, Some(&adapters), &tokens, Prefix::None).unwrap();
        assert!(bare
            .logits
            .data
            .iter()
            .zip(&adapted.logits.data)
            .all(|(a, b)| a == b));
    }

    #[test]
    fn causality_perturbing_later_tokens_preserves_earlier_logits() {
        let cfg = ModelConfig::small();
        let params = ModelParams::random(&cfg, 11).unwrap();
        let tokens = rand_tokens(10, 256, 21);
        let base = forward_with_prefix(&params, None, &tokens, Prefix::None).unwrap();
        let v = cfg.vocab_size;
        for j in [3usize, 7, 9] {
            let mut perturbed = tokens.clone();
            perturbed[j] = (perturbed[j] + 1) % 256;
            let res = forward_with_prefix(&params, None, &perturbed, Prefix::None).unwrap();
            assert!(
                base.logits.data[..j * v]
                    .iter()
                    .zip(&res.logits.data[..j * v])
                    .all(|(a, b)| a == b),
                "logits before {j} changed"
            );
            assert_ne!(base.logits.data[j * v..], res.logits.data[j * v..]);
        }
    }

    #[test]
    fn attended_pairs_match_enumeration() {
        let cfg = wide_config();
        let params = ModelParams::random(&cfg, 13).unwrap();
        // enumeration oracle over the mask predicate: query i sees the
        // prefix plus new rows 0..=i
        let enumerate = |extent: usize, t: usize| -> u64 {
            let mut count = 0u64;
            for i in 0..t {
                for j in 0..extent + t {
                    if j < extent + i + 1 {
                        count += 1;
                    }
                }
            }
            count * (cfg.n_heads * cfg.n_layers) as u64
        };
        let first = forward_with_prefix(&params, None, &[1, 2, 3, 4], Prefix::None).unwrap();
        assert_eq!(first.attended_pairs, enumerate(0, 4));
        assert_eq!(
            first.attended_pairs,
            attended_pair_count(0, 4, cfg.n_heads, cfg.n_layers)
        );
        // one query over an injected extent-4 cache: 5 pairs per head
        let res = forward_with_prefix(&params, None, &[9], Prefix::Kv(&first.cache)).unwrap();
        assert_eq!(res.attended_pairs, enumerate(4, 1));
        assert_eq!(
            res.attended_pairs / (cfg.n_heads * cfg.n_layers) as u64,
            5
        );
    }

    #[test]
    fn greedy_decode_rigged_head_repeats_target() {
        let cfg = ModelConfig::tiny();
        let mut params = ModelParams::random(&cfg, 15).unwrap();
        make_embeddings_constant(&mut params);
        let hidden = probe_hidden(&params, &[0]);
        rig_head_towards(&mut params, &hidden[0], 7);
        let out = greedy_decode(&params, Prefix::None, &[0], 6, cfg.eos_id).unwrap();
        assert_eq!(out, vec![7, 7, 7, 7, 7, 7]);
    }

    #[test]
    fn greedy_decode_stops_immediately_on_rigged_eos() {
        let cfg = ModelConfig::tiny();
        let mut params = ModelParams::random(&cfg, 17).unwrap();
        make_embeddings_constant(&mut params);
        let hidden = probe_hidden(&params, &[0]);
        rig_head_towards(&mut params, &hidden[0], cfg.eos_id);
        let out = greedy_decode(&params, Prefix::None, &[0], 6, cfg.eos_id).unwrap();
        assert!(out.is_empty());
    }

    #[test]
    fn greedy_decode_is_deterministic() {
        let cfg = ModelConfig::tiny();
        let params = ModelParams::random(&cfg, 19).unwrap();
        let a = greedy_decode(&params, Prefix::None, &[1, 2], 8, cfg.eos_id).unwrap();
        let b = greedy_decode(&params, Prefix::None, &[1, 2], 8, cfg.eos_id).unwrap();
        assert_eq!(a, b);
        assert!(a.len() <= 8);
    }

    #[test]
    fn rope_apply_identity_at_origin_and_range_error() {
        let x = Tensor::from_vec(&[1, 4], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let y = rope_apply(&x, 1, &[0], 10_000.0, 64).unwrap();
        assert_eq!(x.data, y.data);
        assert!(matches!(
            rope_apply(&x, 1, &[64], 10_000.0, 64),
            Err(Error::Range(_))
        ));
    }

    #[test]
    fn causal_attention_single_row_copies_value() {
        let cfg = wide_config();
        let params = ModelParams::random(&cfg, 23).unwrap();
        let x = Tensor::from_vec(&[1, 4], vec![0.3, -0.2, 0.9, 0.1]).unwrap();
        let mut cache = KVCache::new(cfg.n_layers, cfg.n_heads, cfg.head_dim(), 0);
        let out = causal_attention(&params, 0, &x, &mut cache, &[0]).unwrap();
        // softmax over one key is 1, so out = (x·Wv)·Wo
        let mut g = Graph::<f32>::new();
        let xv = g.insert_frozen(&x);
        let wv = g.insert_frozen(&params.layers[0].wv);
        let wo = g.insert_frozen(&params.layers[0].wo);
        let v = g.matmul(xv, wv).unwrap();
        let want = g.matmul(v, wo).unwrap();
        assert_eq!(out.data, g.value(want).data);
        assert_eq!(cache.layer_extent(0), 1);
        assert_eq!(cache.layer_extent(1), 0);
    }

    #[test]
    fn causal_attention_position_contracts() {
        let cfg = wide_config();
        let params = ModelParams::random(&cfg, 25).unwrap();
        let x = Tensor::zeros(&[2, 4]);
        let mut cache = KVCache::new(cfg.n_layers, cfg.n_heads, cfg.head_dim(), 3);
        // positions must be strictly increasing
        assert!(matches!(
            causal_attention(&params, 0, &x, &mut cache, &[5, 5]),
            Err(Error::Contract(_))
        ));
        // and must start at or after the cache end (offset 3 + extent 0)
        assert!(matches!(
            causal_attention(&params, 0, &x, &mut cache, &[1, 2]),
            Err(Error::Contract(_))
        ));
        // and must stay within max_positions
        assert!(matches!(
            causal_attention(&params, 0, &x, &mut cache, &[62, 64]),
            Err(Error::Range(_))
        ));
        // layer-count mismatch is a config error
        let mut wrong = KVCache::new(cfg.n_layers + 1, cfg.n_heads, cfg.head_dim(), 0);
        assert!(matches!(
            causal_attention(&params, 0, &x, &mut wrong, &[0, 1]),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn causal_attention_earlier_rows_ignore_later_input() {
        let cfg = wide_config();
        let params = ModelParams::random(&cfg, 27).unwrap();
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        let data: Vec<f32> = (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let x = Tensor::from_vec(&[3, 4], data.clone()).unwrap();
        let mut cache = KVCache::new(cfg.n_layers, cfg.n_heads, cfg.head_dim(), 0);
        let out = causal_attention(&params, 0, &x, &mut cache, &[0, 1, 2]).unwrap();
        let mut data2 = data;
        data2[8] += 1.0; // perturb the last row only
        let x2 = Tensor::from_vec(&[3, 4], data2).unwrap();
        let mut cache2 = KVCache::new(cfg.n_layers, cfg.n_heads, cfg.head_dim(), 0);
        let out2 = causal_attention(&params, 0, &x2, &mut cache2, &[0, 1, 2]).unwrap();
        assert_eq!(out.data[..8], out2.data[..8]);
        assert_ne!(out.data[8..], out2.data[8..]);
    }

    #[test]
    fn embed_prefix_shifts_token_positions() {
        // with an embed prefix of k rows, token logits still come back
        // [t×V] and the cache spans the whole input
        let cfg = ModelConfig::small();
        let params = ModelParams::random(&cfg, 29).unwrap();
        let rows = Tensor::from_vec(&[2, cfg.d_model], vec![0.01; 2 * cfg.d_model]).unwrap();
        let res = forward_with_prefix(&params, None, &[5, 6, 7], Prefix::Embed(&rows)).unwrap();
        assert_eq!(res.logits.dims, vec![3, cfg.vocab_size]);
        assert_eq!(res.cache.extent(), 5);
        assert_eq!(res.cache.position_offset(), 0);

        let bad = Tensor::from_vec(&[2, cfg.d_model + 1], vec![0.0; 2 * (cfg.d_model + 1)]).unwrap();
        assert!(matches!(
            forward_with_prefix(&params, None, &[5], Prefix::Embed(&bad)),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn out_of_vocab_token_is_index_error() {
        let cfg = ModelConfig::tiny();
        let params = ModelParams::random(&cfg, 31).unwrap();
        assert!(matches!(
            forward_with_prefix(&params, None, &[16], Prefix::None),
            Err(Error::Index(_))
        ));
    }
}
