//! The trainable parameter set Θ_Lora: low-rank deltas on the encoder's
//! attention projections, the compressed-token embedding table, and (for
//! the embedding-prefix baseline) an optional regeneration-trigger
//! embedding. Nothing else in the system is ever trainable during
//! compressor training.

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use sha2::{Digest, Sha256};

use crate::model::ModelConfig;
use crate::numerics::{Graph, Real, Tensor, Var};
use crate::{Error, Result};

/// Attention projections that carry LoRA deltas.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Proj {
    Q,
    K,
    V,
    O,
}

pub const PROJECTIONS: [Proj; 4] = [Proj::Q, Proj::K, Proj::V, Proj::O];

impl Proj {
    pub fn name(self) -> &'static str {
        match self {
            Proj::Q => "q",
            Proj::K => "k",
            Proj::V => "v",
            Proj::O => "o",
        }
    }
}

/// One projection's low-rank pair: A is [r×d], B is [d×r], delta is
/// (α/r)·B·A·x with B zero-initialized.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraPair<F: Real = f32> {
    pub a: Tensor<F>,
    pub b: Tensor<F>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerAdapters<F: Real = f32> {
    pub q: LoraPair<F>,
    pub k: LoraPair<F>,
    pub v: LoraPair<F>,
    pub o: LoraPair<F>,
}

impl<F: Real> LayerAdapters<F> {
    pub fn pair(&self, proj: Proj) -> &LoraPair<F> {
        match proj {
            Proj::Q => &self.q,
            Proj::K => &self.k,
            Proj::V => &self.v,
            Proj::O => &self.o,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdapterParams<F: Real = f32> {
    pub rank: usize,
    pub alpha: f32,
    pub layers: Vec<LayerAdapters<F>>,
    /// Learnable input embeddings of the compressed tokens, [k_max×d].
    pub compressed_embedding: Tensor<F>,
    /// Trainable regeneration trigger of the embedding-prefix baseline,
    /// one d-wide row. The KV path triggers on the frozen [BOS] embedding.
    pub regen_trigger: Option<Tensor<F>>,
}

/// Default LoRA rank and scale. The desk config lands the trainable
/// fraction near the 0.3% order of magnitude.
pub const DEFAULT_RANK: usize = 8;
pub const DEFAULT_ALPHA: f32 = 16.0;

/// Fresh adapters: A and the embeddings Normal(0, 0.02), B all zeros, so a
/// fresh adapter set leaves the base model's behavior unchanged.
pub fn init_adapters(
    config: &ModelConfig,
    rank: usize,
    alpha: f32,
    seed: u64,
    with_trigger: bool,
) -> Result<AdapterParams> {
    config.validate()?;
    if rank == 0 || rank > config.d_model {
        return Err(Error::Config(format!(
            "LoRA rank {rank} must be in 1..=d_model ({})",
            config.d_model
        )));
    }
    let d = config.d_model;
    let std = 0.02;
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mark = |mut t: Tensor<f32>| {
        t.requires_grad = true;
        t
    };
    let pair = |rng: &mut ChaCha20Rng| LoraPair {
        a: {
            let mut t = Tensor::randn(&[rank, d], std, rng);
            t.requires_grad = true;
            t
        },
        b: {
            let mut t = Tensor::zeros(&[d, rank]);
            t.requires_grad = true;
            t
        },
    };
    let layers = (0..config.n_layers)
        .map(|_| LayerAdapters {
            q: pair(&mut rng),
            k: pair(&mut rng),
            v: pair(&mut rng),
            o: pair(&mut rng),
        })
        .collect();
    Ok(AdapterParams {
        rank,
        alpha,
        layers,
        compressed_embedding: mark(Tensor::randn(&[config.k_max, d], std, &mut rng)),
        regen_trigger: with_trigger.then(|| mark(Tensor::randn(&[1, d], std, &mut rng))),
    })
}

impl<F: Real> AdapterParams<F> {
    pub fn named_tensors(&self) -> Vec<(String, &Tensor<F>)> {
        let mut out = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            for proj in PROJECTIONS {
                let p = layer.pair(proj);
                out.push((format!("lora.{i}.{}.a", proj.name()), &p.a));
                out.push((format!("lora.{i}.{}.b", proj.name()), &p.b));
            }
        }
        out.push(("compressed_embedding".into(), &self.compressed_embedding));
        if let Some(t) = &self.regen_trigger {
            out.push(("regen_trigger".into(), t));
        }
        out
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor<F>)> {
        let mut out = Vec::new();
        for (i, layer) in self.layers.iter_mut().enumerate() {
            let LayerAdapters { q, k, v, o } = layer;
            for (proj, pair) in [("q", q), ("k", k), ("v", v), ("o", o)] {
                let LoraPair { a, b } = pair;
                out.push((format!("lora.{i}.{proj}.a"), a));
                out.push((format!("lora.{i}.{proj}.b"), b));
            }
        }
        out.push(("compressed_embedding".into(), &mut self.compressed_embedding));
        if let Some(t) = &mut self.regen_trigger {
            out.push(("regen_trigger".into(), t));
        }
        out
    }

    pub fn count_params(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn k_max(&self) -> usize {
        self.compressed_embedding.dims[0]
    }

    pub fn cast<G: Real>(&self) -> AdapterParams<G> {
        AdapterParams {
            rank: self.rank,
            alpha: self.alpha,
            layers: self
                .layers
                .iter()
                .map(|l| LayerAdapters {
                    q: LoraPair { a: l.q.a.cast(), b: l.q.b.cast() },
                    k: LoraPair { a: l.k.a.cast(), b: l.k.b.cast() },
                    v: LoraPair { a: l.v.a.cast(), b: l.v.b.cast() },
                    o: LoraPair { a: l.o.a.cast(), b: l.o.b.cast() },
                })
                .collect(),
            compressed_embedding: self.compressed_embedding.cast(),
            regen_trigger: self.regen_trigger.as_ref().map(Tensor::cast),
        }
    }
}

impl AdapterParams<f32> {
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
        crate::model::hex_string(&hasher.finalize())
    }

    pub fn from_named_tensors(
        config: &ModelConfig,
        rank: usize,
        alpha: f32,
        with_trigger: bool,
        tensors: Vec<(String, Tensor<f32>)>,
    ) -> Result<Self> {
        let d = config.d_model;
        let mut map: std::collections::HashMap<String, Tensor<f32>> = tensors.into_iter().collect();
        let mut take = |name: String, dims: &[usize]| -> Result<Tensor<f32>> {
            let mut t = map
                .remove(&name)
                .ok_or_else(|| Error::Format(format!("missing adapter tensor {name:?}")))?;
            if t.dims != dims {
                return Err(Error::Format(format!(
                    "tensor {name:?} has dims {:?}, expected {dims:?}",
                    t.dims
                )));
            }
            t.requires_grad = true;
            Ok(t)
        };
        let mut layers = Vec::with_capacity(config.n_layers);
        for i in 0..config.n_layers {
            let mut get_pair = |proj: Proj| -> Result<LoraPair> {
                Ok(LoraPair {
                    a: take(format!("lora.{i}.{}.a", proj.name()), &[rank, d])?,
                    b: take(format!("lora.{i}.{}.b", proj.name()), &[d, rank])?,
                })
            };
            layers.push(LayerAdapters {
                q: get_pair(Proj::Q)?,
                k: get_pair(Proj::K)?,
                v: get_pair(Proj::V)?,
                o: get_pair(Proj::O)?,
            });
        }
        let compressed_embedding = take("compressed_embedding".into(), &[config.k_max, d])?;
        let regen_trigger = if with_trigger {
            Some(take("regen_trigger".into(), &[1, d])?)
        } else {
            None
        };
        if let Some(name) = map.keys().next() {
            return Err(Error::Format(format!("unexpected adapter tensor {name:?}")));
        }
        Ok(AdapterParams {
            rank,
            alpha,
            layers,
            compressed_embedding,
            regen_trigger,
        })
    }
}

/// Wx + (α/r)·B·(A·x) on the graph, with x in rows: the delta is
/// (x·Aᵀ)·Bᵀ scaled by α/r.
pub fn lora_linear_apply<F: Real>(
    g: &mut Graph<F>,
    wx: Var,
    x: Var,
    a: Var,
    b: Var,
    alpha: f32,
    rank: usize,
) -> Result<Var> {
    if rank == 0 {
        return Err(Error::Config("LoRA rank must be at least 1".into()));
    }
    let ax = g.matmul_nt(x, a)?;
    let delta = g.matmul_nt(ax, b)?;
    let scaled = g.scale(delta, alpha as f64 / rank as f64)?;
    g.add(wx, scaled)
}

/// Trainable scalars over frozen base scalars.
pub fn trainable_param_fraction(
    params: &crate::model::ModelParams,
    adapters: &AdapterParams,
) -> f64 {
    adapters.count_params() as f64 / params.count_params() as f64
}

/// Closed-form adapter count: 4 projections × 2 matrices × d·r per layer,
/// plus the compressed-token table and the optional trigger.
pub fn adapter_param_count_formula(config: &ModelConfig, rank: usize, with_trigger: bool) -> usize {
    let d = config.d_model;
    config.n_layers * 4 * 2 * d * rank + config.k_max * d + if with_trigger { d } else { 0 }
}

/// Slot names for splicing a probe tensor into the adapter set during
/// gradient checks.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AdapterSlot {
    LoraA(usize, Proj),
    LoraB(usize, Proj),
    CompressedEmbedding,
    RegenTrigger,
}

/// Graph handles for one inserted adapter set.
pub(crate) struct AdapterVars {
    pub rank: usize,
    pub alpha: f32,
    pub layers: Vec<[(Var, Var); 4]>,
    pub compressed_embedding: Var,
    pub regen_trigger: Option<Var>,
}

impl AdapterVars {
    pub(crate) fn insert<F: Real>(g: &mut Graph<F>, adapters: &AdapterParams) -> AdapterVars {
        Self::insert_with_override(g, adapters, None).expect("no override cannot fail")
    }

    /// Insert all adapter tensors as leaves, optionally substituting an
    /// existing graph var for one slot (the grad-check probe).
    pub(crate) fn insert_with_override<F: Real>(
        g: &mut Graph<F>,
        adapters: &AdapterParams,
        over: Option<(AdapterSlot, Var)>,
    ) -> Result<AdapterVars> {
        let pick = |g: &mut Graph<F>, slot: AdapterSlot, t: &Tensor<f32>| -> Result<Var> {
            if let Some((s, v)) = over {
                if s == slot {
                    if g.value(v).dims != t.dims {
                        return Err(Error::Dimension(format!(
                            "override for {slot:?} has dims {:?}, expected {:?}",
                            g.value(v).dims,
                            t.dims
                        )));
                    }
                    return Ok(v);
                }
            }
            Ok(g.insert(t))
        };
        let mut layers = Vec::with_capacity(adapters.layers.len());
        for (i, layer) in adapters.layers.iter().enumerate() {
            let mut four = [(Var::default(), Var::default()); 4];
            for (slot_idx, proj) in PROJECTIONS.into_iter().enumerate() {
                let p = layer.pair(proj);
                let a = pick(g, AdapterSlot::LoraA(i, proj), &p.a)?;
                let b = pick(g, AdapterSlot::LoraB(i, proj), &p.b)?;
                four[slot_idx] = (a, b);
            }
            layers.push(four);
        }
        let compressed_embedding = pick(
            g,
            AdapterSlot::CompressedEmbedding,
            &adapters.compressed_embedding,
        )?;
        let regen_trigger = match &adapters.regen_trigger {
            Some(t) => Some(pick(g, AdapterSlot::RegenTrigger, t)?),
            None => None,
        };
        Ok(AdapterVars {
            rank: adapters.rank,
            alpha: adapters.alpha,
            layers,
            compressed_embedding,
            regen_trigger,
        })
    }

    /// Vars aligned with [`AdapterParams::named_tensors`] order.
    pub(crate) fn vars_in_named_order(&self) -> Vec<Var> {
        let mut out = Vec::new();
        for layer in &self.layers {
            for (a, b) in layer {
                out.push(*a);
                out.push(*b);
            }
        }
        out.push(self.compressed_embedding);
        if let Some(t) = self.regen_trigger {
            out.push(t);
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelParams;
    use crate::numerics::Graph;

    fn t32(dims: &[usize], data: &[f32]) -> Tensor<f32> {
        Tensor::from_vec(dims, data.to_vec()).unwrap()
    }

    #[test]
    fn zero_b_is_identity_on_wx() {
        let mut g = Graph::<f32>::new();
        let wx = g.leaf(t32(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let x = g.leaf(t32(&[2, 3], &[0.5, -0.5, 1.0, 0.0, 2.0, -1.0]));
        let a = g.leaf(t32(&[2, 3], &[0.1, 0.2, 0.3, 0.4, 0.5, 0.6]));
        let b = g.leaf(Tensor::zeros(&[3, 2]));
        let out = lora_linear_apply(&mut g, wx, x, a, b, 16.0, 2).unwrap();
        assert_eq!(g.value(out).data, g.value(wx).data);
    }

    #[test]
    fn rank_one_unit_basis_adds_e() {
        // A = eᵀ, B = e, α = 1, r = 1, x = e: delta = B·(A·x) = e
        let d = 4;
        let e: Vec<f32> = vec![1.0, 0.0, 0.0, 0.0];
        let mut g = Graph::<f32>::new();
        let wx = g.leaf(Tensor::zeros(&[1, d]));
        let x = g.leaf(t32(&[1, d], &e));
        let a = g.leaf(t32(&[1, d], &e));
        let b = g.leaf(t32(&[d, 1], &e));
        let out = lora_linear_apply(&mut g, wx, x, a, b, 1.0, 1).unwrap();
        assert_eq!(g.value(out).data, e);
    }

    #[test]
    fn gradient_flows_to_a_and_b_not_w() {
        let mut g = Graph::<f32>::new();
        let w = g.leaf(t32(&[2, 2], &[0.5, 0.1, -0.2, 0.4]));
        let x = g.leaf(t32(&[1, 2], &[1.0, 2.0]));
        let a = g.leaf(t32(&[1, 2], &[0.3, 0.7]).with_requires_grad(true));
        let b = g.leaf(t32(&[2, 1], &[0.2, -0.6]).with_requires_grad(true));
        let wx = g.matmul(x, w).unwrap();
        let out = lora_linear_apply(&mut g, wx, x, a, b, 2.0, 1).unwrap();
        let loss = g.sum(out).unwrap();
        g.backward(loss).unwrap();
        assert!(g.grad(a).is_some());
        assert!(g.grad(b).is_some());
        assert!(g.grad(w).is_none());
        assert!(g.grad(x).is_none());
    }

    #[test]
    fn init_is_deterministic_per_seed() {
        let cfg = ModelConfig::tiny();
        let a = init_adapters(&cfg, 2, 4.0, 5, true).unwrap();
        let b = init_adapters(&cfg, 2, 4.0, 5, true).unwrap();
        assert_eq!(a.sha256_hex(), b.sha256_hex());
        let c = init_adapters(&cfg, 2, 4.0, 6, true).unwrap();
        assert_ne!(a.sha256_hex(), c.sha256_hex());
        assert_ne!(a.layers[0].q.a.data, c.layers[0].q.a.data);
    }

    #[test]
    fn init_zeroes_b_and_marks_trainable() {
        let cfg = ModelConfig::tiny();
        let adapters = init_adapters(&cfg, 2, 4.0, 1, false).unwrap();
        for layer in &adapters.layers {
            for proj in PROJECTIONS {
                assert!(layer.pair(proj).b.data.iter().all(|&v| v == 0.0));
            }
        }
        assert!(adapters.named_tensors().iter().all(|(_, t)| t.requires_grad));
        assert!(adapters.regen_trigger.is_none());
    }

    #[test]
    fn oversized_rank_is_config_error() {
        let cfg = ModelConfig::tiny();
        assert!(matches!(
            init_adapters(&cfg, cfg.d_model + 1, 4.0, 1, false),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn fraction_formula_matches_enumeration() {
        for (cfg, rank, trigger) in [
            (ModelConfig::default(), 8usize, false),
            (ModelConfig::default(), 8, true),
            (ModelConfig::small(), 4, true),
            (ModelConfig::tiny(), 2, false),
        ] {
            let params = ModelParams::random(&cfg, 0).unwrap();
            let adapters = init_adapters(&cfg, rank, 16.0, 0, trigger).unwrap();
            let formula = adapter_param_count_formula(&cfg, rank, trigger);
            assert_eq!(adapters.count_params(), formula);
            let frac = trainable_param_fraction(&params, &adapters);
            assert!((frac - formula as f64 / params.count_params() as f64).abs() < 1e-15);
        }
    }

    #[test]
    fn llama_8b_shaped_config_lands_near_paper_fraction() {
        // An 8B-shaped architecture; find a rank whose added-parameter
        // fraction is approximately 0.3% and print the consistency report.
        let cfg = ModelConfig {
            vocab_size: 128_256,
            d_model: 4096,
            n_layers: 32,
            n_heads: 32,
            ffn_dim: 14336,
            max_positions: 8192,
            rope_theta: 500_000.0,
            k_max: 16,
            bos_id: 128_000,
            eos_id: 128_001,
            pad_id: 128_002,
            compressed_base_id: 128_003,
        };
        let base: usize = {
            let d = cfg.d_model;
            let per_layer = 4 * d * d + 3 * d * cfg.ffn_dim + 2 * d;
            cfg.vocab_size * d * 2 + cfg.n_layers * per_layer + d
        };
        let mut found = None;
        for rank in 1..=64usize {
            let frac = adapter_param_count_formula(&cfg, rank, false) as f64 / base as f64;
            if (0.002..=0.004).contains(&frac) {
                found = Some((rank, frac));
            }
        }
        let (rank, frac) = found.expect("some rank lands near 0.3%");
        println!(
            "consistency report: 8B-shaped base has {base} params; rank {rank} adds {:.4}% \
             (target ≈ 0.3%)",
            frac * 100.0
        );
        assert!((0.002..=0.004).contains(&frac));
    }

    #[test]
    fn zero_rank_hypothetical_counts_embeddings_only() {
        // rank cannot be constructed through init, but the formula's
        // boundary still counts only the embedding table.
        let cfg = ModelConfig::tiny();
        assert_eq!(
            adapter_param_count_formula(&cfg, 0, false),
            cfg.k_max * cfg.d_model
        );
    }
}
