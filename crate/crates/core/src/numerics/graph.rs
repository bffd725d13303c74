//! Reverse-mode automatic differentiation over dense tensors.
//!
//! A [`Graph`] records every executed op in issue order, which is already a
//! topological order, so backward is a single reverse sweep. Graphs are
//! single-use: one forward build, at most one `backward`, then the graph is
//! consumed. Leaf gradients accumulate additively.

use super::gemm::{gemm_nn, gemm_nt, gemm_tn};
use super::real::Real;
use super::tensor::Tensor;
use crate::{Error, Result};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Var(usize);

/// Reduction mode for loss-style ops.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Reduction {
    Sum,
    Mean,
}

enum Op<F: Real> {
    Leaf,
    Matmul {
        a: Var,
        b: Var,
    },
    /// a · bᵀ with b stored [r×q].
    MatmulNT {
        a: Var,
        b: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Scale {
        x: Var,
        c: F,
    },
    Silu {
        x: Var,
    },
    RmsNorm {
        x: Var,
        weight: Var,
        inv_rms: Vec<F>,
    },
    SoftmaxLastDim {
        x: Var,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        reduction: Reduction,
        probs: Vec<F>,
    },
    Rope {
        x: Var,
        head_dim: usize,
        positions: Vec<usize>,
        theta: f64,
    },
    /// Causal multi-head attention over `prefix_extent` injected key/value
    /// rows plus the new rows. `weights` holds the softmax matrix per head,
    /// zero-padded to [n_heads × t × s].
    Attention {
        q: Var,
        k: Var,
        v: Var,
        n_heads: usize,
        prefix_extent: usize,
        weights: Vec<F>,
    },
    EmbedLookup {
        table: Var,
        ids: Vec<u32>,
    },
    ConcatRows {
        a: Var,
        b: Var,
    },
    SliceRows {
        x: Var,
        start: usize,
        len: usize,
    },
    Sum {
        x: Var,
    },
}

struct Node<F: Real> {
    value: Tensor<F>,
    grad: Option<Vec<F>>,
    needs_grad: bool,
    op: Op<F>,
}

pub struct Graph<F: Real = f32> {
    nodes: Vec<Node<F>>,
    consumed: bool,
}

impl<F: Real> Default for Graph<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Real> Graph<F> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            consumed: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Insert a tensor as a leaf; its `requires_grad` flag decides whether
    /// backward reaches it.
    pub fn leaf(&mut self, t: Tensor<F>) -> Var {
        let needs = t.requires_grad;
        self.push(t, needs, Op::Leaf)
    }

    /// Insert an `f32` tensor (casting to the graph's scalar type), keeping
    /// its `requires_grad` flag.
    pub fn insert(&mut self, t: &Tensor<f32>) -> Var {
        self.leaf(t.cast::<F>())
    }

    /// Insert an `f32` tensor as a frozen constant regardless of its flag.
    pub fn insert_frozen(&mut self, t: &Tensor<f32>) -> Var {
        let mut cast = t.cast::<F>();
        cast.requires_grad = false;
        self.leaf(cast)
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    /// Gradient buffer of a node, if backward produced one.
    pub fn grad(&self, v: Var) -> Option<&[F]> {
        self.nodes[v.0].grad.as_deref()
    }

    fn push(&mut self, value: Tensor<F>, needs_grad: bool, op: Op<F>) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            needs_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn dims(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].value.dims
    }

    // ── ops ──────────────────────────────────────────────────────────

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (da, db) = (self.dims(a).to_vec(), self.dims(b).to_vec());
        if da.len() != 2 || db.len() != 2 || da[1] != db[0] {
            return Err(Error::Dimension(format!(
                "matmul expects [m×p]·[p×n], got {da:?}·{db:?}"
            )));
        }
        let (m, p, n) = (da[0], da[1], db[1]);
        let mut out = vec![F::zero(); m * n];
        gemm_nn(m, p, n, &self.nodes[a.0].value.data, &self.nodes[b.0].value.data, &mut out);
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(
            Tensor {
                dims: vec![m, n],
                data: out,
                requires_grad: needs,
                grad: None,
            },
            needs,
            Op::Matmul { a, b },
        ))
    }

    /// a[m×q] · b[r×q]ᵀ → [m×r]
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (da, db) = (self.dims(a).to_vec(), self.dims(b).to_vec());
        if da.len() != 2 || db.len() != 2 || da[1] != db[1] {
            return Err(Error::Dimension(format!(
                "matmul_nt expects [m×q]·[r×q]ᵀ, got {da:?}·{db:?}ᵀ"
            )));
        }
        let (m, q, r) = (da[0], da[1], db[0]);
        let mut out = vec![F::zero(); m * r];
        gemm_nt(m, q, r, &self.nodes[a.0].value.data, &self.nodes[b.0].value.data, &mut out);
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(
            Tensor {
                dims: vec![m, r],
                data: out,
                requires_grad: needs,
                grad: None,
            },
            needs,
            Op::MatmulNT { a, b },
        ))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.dims(a) != self.dims(b) {
            return Err(Error::Dimension(format!(
                "add shape mismatch: {:?} vs {:?}",
                self.dims(a),
                self.dims(b)
            )));
        }
        let data = self.nodes[a.0]
            .value
            .data
            .iter()
            .zip(&self.nodes[b.0].value.data)
            .map(|(&x, &y)| x + y)
            .collect();
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(
            Tensor {
                dims: self.dims(a).to_vec(),
                data,
                requires_grad: needs,
                grad: None,
            },
            needs,
            Op::Add { a, b },
        ))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.dims(a) != self.dims(b) {
            return Err(Error::Dimension(format!(
                "mul shape mismatch: {:?} vs {:?}",
                self.dims(a),
                self.dims(b)
            )));
        }
        let data = self.nodes[a.0]
            .value
            .data
            .iter()
            .zip(&self.nodes[b.0].value.data)
            .map(|(&x, &y)| x * y)
            .collect();
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(
            Tensor {
                dims: self.dims(a).to_vec(),
                data,
                requires_grad: needs,
                grad: None,
            },
            needs,
            Op::Mul { a, b },
        ))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let c = F::of_f64(c);
        let data = self.nodes[x.0].value.data.iter().map(|&v| v * c).collect();
        let needs = self.needs(x);
        Ok(self.push(
            Tensor {
                dims: self.dims(x).to_vec(),
                data,
                requires_grad: needs,
                grad: None,
            },
            needs,
            Op::Scale { x, c },
        ))
    }

    pub fn silu(&mut self, x: Var) -> Result<Var> {
        let data = self.nodes[x.0]
            .value
            .data
            .iter()
            .map(|&v| {
                let sig = F::one() / (F::one() + (-v).exp());
                v * sig
            })
            .collect();
        let needs = self.needs(x);
        Ok(self.push(
            Tensor {
                dims: self.dims(x).to_vec(),
                data,
                requires_grad: needs,
                grad: None,
            },
            needs,
            Op::Silu { x },
        ))
    }

    /// out = x / sqrt(mean(x²) + eps) ⊙ weight, over the last dimension.
    pub fn rms_norm(&mut self, x: Var, weight: Var, eps: f64) -> Result<Var> {
        let d = self.nodes[x.0].value.last_dim();
        if self.dims(weight) != [d] {
            return Err(Error::Dimension(format!(
                "rms_norm weight must be [{d}], got {:?}",
                self.dims(weight)
            )));
        }
        if eps <= 0.0 {
            return Err(Error::Config("rms_norm eps must be positive".into()));
        }
        let eps = F::of_f64(eps);
        let rows = self.nodes[x.0].value.rows();
        let xv = &self.nodes[x.0].value.data;
        let wv = &self.nodes[weight.0].value.data;
        let mut out = vec![F::zero(); rows * d];
        let mut inv_rms = vec![F::zero(); rows];
        let dn = F::from_usize(d).expect("dim fits in F");
        for r in 0..rows {
            let row = &xv[r * d..(r + 1) * d];
            let ms = row.iter().map(|&v| v * v).sum::<F>() / dn;
            let inv = F::one() / (ms + eps).sqrt();
            inv_rms[r] = inv;
            for j in 0..d {
                out[r * d + j] = row[j] * inv * wv[j];
            }
        }
        let needs = self.needs(x) || self.needs(weight);
        Ok(self.push(
            Tensor {
                dims: self.dims(x).to_vec(),
                data: out,
                requires_grad: needs,
                grad: None,
            },
            needs,
            Op::RmsNorm {
                x,
                weight,
                inv_rms,
            },
        ))
    }

    /// Numerically stable softmax over the last dimension.
    pub fn softmax_lastdim(&mut self, x: Var) -> Result<Var> {
        let d = self.nodes[x.0].value.last_dim();
        if d == 0 {
            return Err(Error::Dimension("softmax over zero-width dim".into()));
        }
        let rows = self.nodes[x.0].value.rows();
        let xv = &self.nodes[x.0].value.data;
        let mut out = vec![F::zero(); rows * d];
        for r in 0..rows {
            let row = &xv[r * d..(r + 1) * d];
            softmax_row(row, &mut out[r * d..(r + 1) * d]);
        }
        let needs = self.needs(x);
        Ok(self.push(
            Tensor {
                dims: self.dims(x).to_vec(),
                data: out,
                requires_grad: needs,
                grad: None,
            },
            needs,
            Op::SoftmaxLastDim { x },
        ))
    }

    /// −Σ log softmax(logits)[i, target_i], summed or averaged over rows.
    pub fn cross_entropy(
        &mut self,
        logits: Var,
        targets: &[usize],
        reduction: Reduction,
    ) -> Result<Var> {
        let dims = self.dims(logits).to_vec();
        if dims.len() != 2 {
            return Err(Error::Dimension(format!(
                "cross_entropy expects [n×V] logits, got {dims:?}"
            )));
        }
        let (n, v) = (dims[0], dims[1]);
        if targets.len() != n || n == 0 {
            return Err(Error::Dimension(format!(
                "cross_entropy targets length {} for {} rows",
                targets.len(),
                n
            )));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= v) {
            return Err(Error::Index(format!(
                "cross_entropy target {bad} out of range for vocab {v}"
            )));
        }
        let xv = &self.nodes[logits.0].value.data;
        let mut probs = vec![F::zero(); n * v];
        let mut total = F::zero();
        for i in 0..n {
            let row = &xv[i * v..(i + 1) * v];
            let m = row.iter().cloned().fold(F::neg_infinity(), F::max);
            let sum_exp = row.iter().map(|&x| (x - m).exp()).sum::<F>();
            let lse = m + sum_exp.ln();
            for j in 0..v {
                probs[i * v + j] = (row[j] - lse).exp();
            }
            total += lse - row[targets[i]];
        }
        if let Reduction::Mean = reduction {
            total = total / F::from_usize(n).expect("n fits in F");
        }
        let needs = self.needs(logits);
        Ok(self.push(
            Tensor {
                dims: vec![1],
                data: vec![total],
                requires_grad: needs,
                grad: None,
            },
            needs,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                reduction,
                probs,
            },
        ))
    }

    /// Rotary rotation per head/frequency pair at the given absolute
    /// positions. x is [t×d], interpreted per head of width `head_dim`.
    pub fn rope(&mut self, x: Var, head_dim: usize, positions: &[usize], theta: f64) -> Result<Var> {
        let dims = self.dims(x).to_vec();
        if dims.len() != 2 || dims[1] % head_dim != 0 || head_dim % 2 != 0 {
            return Err(Error::Dimension(format!(
                "rope expects [t×d] with even head_dim dividing d, got {dims:?}, head_dim {head_dim}"
            )));
        }
        if positions.len() != dims[0] {
            return Err(Error::Dimension(format!(
                "rope got {} positions for {} rows",
                positions.len(),
                dims[0]
            )));
        }
        let mut data = self.nodes[x.0].value.data.clone();
        rope_rotate(&mut data, dims[1], head_dim, positions, theta, false);
        let needs = self.needs(x);
        Ok(self.push(
            Tensor {
                dims,
                data,
                requires_grad: needs,
                grad: None,
            },
            needs,
            Op::Rope {
                x,
                head_dim,
                positions: positions.to_vec(),
                theta,
            },
        ))
    }

    /// Scaled dot-product causal attention. `k` and `v` carry
    /// `prefix_extent` injected rows followed by the rows aligned with `q`;
    /// query `i` attends to the full prefix plus new rows `0..=i`.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        n_heads: usize,
        prefix_extent: usize,
    ) -> Result<Var> {
        let dq = self.dims(q).to_vec();
        let dk = self.dims(k).to_vec();
        let dv = self.dims(v).to_vec();
        if dq.len() != 2 || dk.len() != 2 || dv.len() != 2 || dq[1] != dk[1] || dk != dv {
            return Err(Error::Dimension(format!(
                "attention shapes q{dq:?} k{dk:?} v{dv:?} inconsistent"
            )));
        }
        let (t, d) = (dq[0], dq[1]);
        let s = dk[0];
        if d % n_heads != 0 {
            return Err(Error::Dimension(format!(
                "attention d_model {d} not divisible by {n_heads} heads"
            )));
        }
        if s != prefix_extent + t {
            return Err(Error::Dimension(format!(
                "attention got {s} key rows for prefix {prefix_extent} + {t} new rows"
            )));
        }
        let dh = d / n_heads;
        let scale = F::of_f64(1.0 / (dh as f64).sqrt());
        let qv = &self.nodes[q.0].value.data;
        let kv = &self.nodes[k.0].value.data;
        let vv = &self.nodes[v.0].value.data;
        let mut out = vec![F::zero(); t * d];
        let mut weights = vec![F::zero(); n_heads * t * s];
        let mut scores = vec![F::zero(); s];
        for h in 0..n_heads {
            let off = h * dh;
            for i in 0..t {
                let allowed = prefix_extent + i + 1;
                let q_row = &qv[i * d + off..i * d + off + dh];
                for j in 0..allowed {
                    let k_row = &kv[j * d + off..j * d + off + dh];
                    let mut acc = F::zero();
                    for (&a, &b) in q_row.iter().zip(k_row) {
                        acc += a * b;
                    }
                    scores[j] = acc * scale;
                }
                let w_row = &mut weights[h * t * s + i * s..h * t * s + i * s + allowed];
                softmax_row(&scores[..allowed], w_row);
                let o_row = &mut out[i * d + off..i * d + off + dh];
                for (j, &w) in w_row.iter().enumerate() {
                    let v_row = &vv[j * d + off..j * d + off + dh];
                    for (o, &val) in o_row.iter_mut().zip(v_row) {
                        *o += w * val;
                    }
                }
            }
        }
        let needs = self.needs(q) || self.needs(k) || self.needs(v);
        Ok(self.push(
            Tensor {
                dims: vec![t, d],
                data: out,
                requires_grad: needs,
                grad: None,
            },
            needs,
            Op::Attention {
                q,
                k,
                v,
                n_heads,
                prefix_extent,
                weights,
            },
        ))
    }

    /// Softmax weights of an attention node, for inspection in tests.
    pub fn attention_weights(&self, attn: Var) -> Option<&[F]> {
        match &self.nodes[attn.0].op {
            Op::Attention { weights, .. } => Some(weights),
            _ => None,
        }
    }

    /// Row gather from an embedding table.
    pub fn embed_lookup(&mut self, table: Var, ids: &[u32]) -> Result<Var> {
        let dims = self.dims(table).to_vec();
        if dims.len() != 2 {
            return Err(Error::Dimension(format!(
                "embed_lookup table must be [rows×d], got {dims:?}"
            )));
        }
        let (rows, d) = (dims[0], dims[1]);
        if ids.is_empty() {
            return Err(Error::Dimension("embed_lookup with no ids".into()));
        }
        if let Some(&bad) = ids.iter().find(|&&id| id as usize >= rows) {
            return Err(Error::Index(format!(
                "embed_lookup id {bad} out of range for table with {rows} rows"
            )));
        }
        let tv = &self.nodes[table.0].value.data;
        let mut out = vec![F::zero(); ids.len() * d];
        for (i, &id) in ids.iter().enumerate() {
            out[i * d..(i + 1) * d].copy_from_slice(&tv[id as usize * d..(id as usize + 1) * d]);
        }
        let needs = self.needs(table);
        Ok(self.push(
            Tensor {
                dims: vec![ids.len(), d],
                data: out,
                requires_grad: needs,
                grad: None,
            },
            needs,
            Op::EmbedLookup {
                table,
                ids: ids.to_vec(),
            },
        ))
    }

    pub fn concat_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        let (da, db) = (self.dims(a).to_vec(), self.dims(b).to_vec());
        if da.len() != 2 || db.len() != 2 || da[1] != db[1] {
            return Err(Error::Dimension(format!(
                "concat_rows needs matching widths: {da:?} vs {db:?}"
            )));
        }
        let mut data = Vec::with_capacity((da[0] + db[0]) * da[1]);
        data.extend_from_slice(&self.nodes[a.0].value.data);
        data.extend_from_slice(&self.nodes[b.0].value.data);
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(
            Tensor {
                dims: vec![da[0] + db[0], da[1]],
                data,
                requires_grad: needs,
                grad: None,
            },
            needs,
            Op::ConcatRows { a, b },
        ))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let dims = self.dims(x).to_vec();
        if dims.len() != 2 {
            return Err(Error::Dimension(format!(
                "slice_rows expects [r×d], got {dims:?}"
            )));
        }
        if start + len > dims[0] || len == 0 {
            return Err(Error::Index(format!(
                "slice_rows {start}..{} out of range for {} rows",
                start + len,
                dims[0]
            )));
        }
        let d = dims[1];
        let data = self.nodes[x.0].value.data[start * d..(start + len) * d].to_vec();
        let needs = self.needs(x);
        Ok(self.push(
            Tensor {
                dims: vec![len, d],
                data,
                requires_grad: needs,
                grad: None,
            },
            needs,
            Op::SliceRows { x, start, len },
        ))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let total = self.nodes[x.0].value.data.iter().cloned().sum::<F>();
        let needs = self.needs(x);
        Ok(self.push(
            Tensor {
                dims: vec![1],
                data: vec![total],
                requires_grad: needs,
                grad: None,
            },
            needs,
            Op::Sum { x },
        ))
    }

    // ── backward ─────────────────────────────────────────────────────

    /// Populate gradients of every `requires_grad` leaf reachable from
    /// `loss`. The graph is consumed: a second call is a state error.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.consumed {
            return Err(Error::State("backward called on a consumed graph".into()));
        }
        let node = &self.nodes[loss.0];
        if node.value.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                node.value.dims
            )));
        }
        if !node.value.data[0].is_finite() {
            return Err(Error::NonFinite("loss is not finite".into()));
        }
        self.consumed = true;
        self.nodes[loss.0].grad = Some(vec![F::one()]);
        for i in (0..=loss.0).rev() {
            if self.nodes[i].grad.is_none() || !self.nodes[i].needs_grad {
                continue;
            }
            let contributions = self.backward_step(i);
            for (var, g) in contributions {
                self.accum_grad(var, g);
            }
        }
        // Leaves keep their grads for the caller; interior grads stay too
        // (the graph is dead after this anyway).
        Ok(())
    }

    fn accum_grad(&mut self, v: Var, g: Vec<F>) {
        let node = &mut self.nodes[v.0];
        if !node.needs_grad {
            return;
        }
        match &mut node.grad {
            Some(buf) => {
                for (dst, src) in buf.iter_mut().zip(&g) {
                    *dst += *src;
                }
            }
            None => node.grad = Some(g),
        }
    }

    /// Compute the gradient contributions this node sends to its parents.
    fn backward_step(&self, i: usize) -> Vec<(Var, Vec<F>)> {
        let node = &self.nodes[i];
        let g = node.grad.as_ref().expect("caller checked grad presence");
        let mut out: Vec<(Var, Vec<F>)> = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::Matmul { a, b } => {
                let (m, n) = (node.value.dims[0], node.value.dims[1]);
                let p = self.dims(*a)[1];
                if self.needs(*a) {
                    let mut da = vec![F::zero(); m * p];
                    gemm_nt(m, n, p, g, &self.nodes[b.0].value.data, &mut da);
                    out.push((*a, da));
                }
                if self.needs(*b) {
                    let mut db = vec![F::zero(); p * n];
                    gemm_tn(m, p, n, &self.nodes[a.0].value.data, g, &mut db);
                    out.push((*b, db));
                }
            }
            Op::MatmulNT { a, b } => {
                let (m, r) = (node.value.dims[0], node.value.dims[1]);
                let q = self.dims(*a)[1];
                if self.needs(*a) {
                    let mut da = vec![F::zero(); m * q];
                    gemm_nn(m, r, q, g, &self.nodes[b.0].value.data, &mut da);
                    out.push((*a, da));
                }
                if self.needs(*b) {
                    let mut db = vec![F::zero(); r * q];
                    gemm_tn(m, r, q, g, &self.nodes[a.0].value.data, &mut db);
                    out.push((*b, db));
                }
            }
            Op::Add { a, b } => {
                if self.needs(*a) {
                    out.push((*a, g.clone()));
                }
                if self.needs(*b) {
                    out.push((*b, g.clone()));
                }
            }
            Op::Mul { a, b } => {
                if self.needs(*a) {
                    let da = g
                        .iter()
                        .zip(&self.nodes[b.0].value.data)
                        .map(|(&gv, &bv)| gv * bv)
                        .collect();
                    out.push((*a, da));
                }
                if self.needs(*b) {
                    let db = g
                        .iter()
                        .zip(&self.nodes[a.0].value.data)
                        .map(|(&gv, &av)| gv * av)
                        .collect();
                    out.push((*b, db));
                }
            }
            Op::Scale { x, c } => {
                if self.needs(*x) {
                    out.push((*x, g.iter().map(|&gv| gv * *c).collect()));
                }
            }
            Op::Silu { x } => {
                if self.needs(*x) {
                    let dx = g
                        .iter()
                        .zip(&self.nodes[x.0].value.data)
                        .map(|(&gv, &xv)| {
                            let sig = F::one() / (F::one() + (-xv).exp());
                            gv * sig * (F::one() + xv * (F::one() - sig))
                        })
                        .collect();
                    out.push((*x, dx));
                }
            }
            Op::RmsNorm {
                x,
                weight,
                inv_rms,
            } => {
                let d = node.value.last_dim();
                let rows = node.value.rows();
                let xv = &self.nodes[x.0].value.data;
                let wv = &self.nodes[weight.0].value.data;
                let dn = F::from_usize(d).expect("dim fits in F");
                if self.needs(*x) {
                    let mut dx = vec![F::zero(); rows * d];
                    for r in 0..rows {
                        let inv = inv_rms[r];
                        let xr = &xv[r * d..(r + 1) * d];
                        let gr = &g[r * d..(r + 1) * d];
                        let mut dot = F::zero();
                        for j in 0..d {
                            dot += gr[j] * wv[j] * xr[j];
                        }
                        let coeff = inv * inv * inv * dot / dn;
                        for j in 0..d {
                            dx[r * d + j] = inv * wv[j] * gr[j] - coeff * xr[j];
                        }
                    }
                    out.push((*x, dx));
                }
                if self.needs(*weight) {
                    let mut dw = vec![F::zero(); d];
                    for r in 0..rows {
                        let inv = inv_rms[r];
                        for j in 0..d {
                            dw[j] += g[r * d + j] * xv[r * d + j] * inv;
                        }
                    }
                    out.push((*weight, dw));
                }
            }
            Op::SoftmaxLastDim { x } => {
                if self.needs(*x) {
                    let d = node.value.last_dim();
                    let rows = node.value.rows();
                    let yv = &node.value.data;
                    let mut dx = vec![F::zero(); rows * d];
                    for r in 0..rows {
                        let yr = &yv[r * d..(r + 1) * d];
                        let gr = &g[r * d..(r + 1) * d];
                        let mut dot = F::zero();
                        for j in 0..d {
                            dot += gr[j] * yr[j];
                        }
                        for j in 0..d {
                            dx[r * d + j] = yr[j] * (gr[j] - dot);
                        }
                    }
                    out.push((*x, dx));
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                reduction,
                probs,
            } => {
                if self.needs(*logits) {
                    let n = targets.len();
                    let v = self.dims(*logits)[1];
                    let s = match reduction {
                        Reduction::Sum => g[0],
                        Reduction::Mean => g[0] / F::from_usize(n).expect("n fits in F"),
                    };
                    let mut dl = vec![F::zero(); n * v];
                    for i in 0..n {
                        for j in 0..v {
                            let indicator = if j == targets[i] { F::one() } else { F::zero() };
                            dl[i * v + j] = s * (probs[i * v + j] - indicator);
                        }
                    }
                    out.push((*logits, dl));
                }
            }
            Op::Rope {
                x,
                head_dim,
                positions,
                theta,
            } => {
                if self.needs(*x) {
                    let mut dx = g.clone();
                    rope_rotate(&mut dx, node.value.dims[1], *head_dim, positions, *theta, true);
                    out.push((*x, dx));
                }
            }
            Op::Attention {
                q,
                k,
                v,
                n_heads,
                prefix_extent,
                weights,
            } => {
                let (t, d) = (node.value.dims[0], node.value.dims[1]);
                let s = self.dims(*k)[0];
                let dh = d / n_heads;
                let scale = F::of_f64(1.0 / (dh as f64).sqrt());
                let qv = &self.nodes[q.0].value.data;
                let kv = &self.nodes[k.0].value.data;
                let vv = &self.nodes[v.0].value.data;
                let needs_q = self.needs(*q);
                let needs_k = self.needs(*k);
                let needs_v = self.needs(*v);
                let mut dq = vec![F::zero(); t * d];
                let mut dk = vec![F::zero(); s * d];
                let mut dv = vec![F::zero(); s * d];
                let mut dw = vec![F::zero(); s];
                for h in 0..*n_heads {
                    let off = h * dh;
                    for i in 0..t {
                        let allowed = prefix_extent + i + 1;
                        let w_row = &weights[h * t * s + i * s..h * t * s + i * s + allowed];
                        let g_row = &g[i * d + off..i * d + off + dh];
                        // dV and dW
                        let mut dot = F::zero();
                        for j in 0..allowed {
                            let mut acc = F::zero();
                            let v_row = &vv[j * d + off..j * d + off + dh];
                            for (gv, &vj) in g_row.iter().zip(v_row) {
                                acc += *gv * vj;
                            }
                            dw[j] = acc;
                            dot += acc * w_row[j];
                            if needs_v {
                                let dv_row = &mut dv[j * d + off..j * d + off + dh];
                                for (dvj, &gv) in dv_row.iter_mut().zip(g_row) {
                                    *dvj += w_row[j] * gv;
                                }
                            }
                        }
                        // softmax backward then into q/k
                        for j in 0..allowed {
                            let ds = w_row[j] * (dw[j] - dot) * scale;
                            if ds == F::zero() {
                                continue;
                            }
                            if needs_q {
                                let k_row = &kv[j * d + off..j * d + off + dh];
                                let dq_row = &mut dq[i * d + off..i * d + off + dh];
                                for (dqj, &kj) in dq_row.iter_mut().zip(k_row) {
                                    *dqj += ds * kj;
                                }
                            }
                            if needs_k {
                                let q_row = &qv[i * d + off..i * d + off + dh];
                                let dk_row = &mut dk[j * d + off..j * d + off + dh];
                                for (dkj, &qj) in dk_row.iter_mut().zip(q_row) {
                                    *dkj += ds * qj;
                                }
                            }
                        }
                    }
                }
                if needs_q {
                    out.push((*q, dq));
                }
                if needs_k {
                    out.push((*k, dk));
                }
                if needs_v {
                    out.push((*v, dv));
                }
            }
            Op::EmbedLookup { table, ids } => {
                if self.needs(*table) {
                    let d = node.value.last_dim();
                    let rows = self.dims(*table)[0];
                    let mut dt = vec![F::zero(); rows * d];
                    for (i, &id) in ids.iter().enumerate() {
                        let dst = &mut dt[id as usize * d..(id as usize + 1) * d];
                        let src = &g[i * d..(i + 1) * d];
                        for (a, &b) in dst.iter_mut().zip(src) {
                            *a += b;
                        }
                    }
                    out.push((*table, dt));
                }
            }
            Op::ConcatRows { a, b } => {
                let ra = self.dims(*a)[0];
                let d = node.value.dims[1];
                if self.needs(*a) {
                    out.push((*a, g[..ra * d].to_vec()));
                }
                if self.needs(*b) {
                    out.push((*b, g[ra * d..].to_vec()));
                }
            }
            Op::SliceRows { x, start, len } => {
                if self.needs(*x) {
                    let d = node.value.dims[1];
                    let rows = self.dims(*x)[0];
                    let mut dx = vec![F::zero(); rows * d];
                    dx[start * d..(start + len) * d].copy_from_slice(g);
                    out.push((*x, dx));
                }
            }
            Op::Sum { x } => {
                if self.needs(*x) {
                    let n = self.nodes[x.0].value.numel();
                    out.push((*x, vec![g[0]; n]));
                }
            }
        }
        out
    }
}

fn softmax_row<F: Real>(row: &[F], out: &mut [F]) {
    let m = row.iter().cloned().fold(F::neg_infinity(), F::max);
    let mut sum = F::zero();
    for (o, &x) in out.iter_mut().zip(row) {
        let e = (x - m).exp();
        *o = e;
        sum += e;
    }
    for o in out.iter_mut() {
        *o = *o / sum;
    }
}

/// In-place rotary rotation shared by the forward op and its backward
/// (backward is the inverse rotation).
pub(crate) fn rope_rotate<F: Real>(
    data: &mut [F],
    d: usize,
    head_dim: usize,
    positions: &[usize],
    theta: f64,
    invert: bool,
) {
    let half = head_dim / 2;
    for (row, &pos) in positions.iter().enumerate() {
        for head_off in (0..d).step_by(head_dim) {
            for pair in 0..half {
                let freq = theta.powf(-2.0 * pair as f64 / head_dim as f64);
                let mut angle = pos as f64 * freq;
                if invert {
                    angle = -angle;
                }
                let (sin, cos) = (F::of_f64(angle.sin()), F::of_f64(angle.cos()));
                let idx = row * d + head_off + 2 * pair;
                let (x0, x1) = (data[idx], data[idx + 1]);
                data[idx] = x0 * cos - x1 * sin;
                data[idx + 1] = x0 * sin + x1 * cos;
            }
        }
    }
}
