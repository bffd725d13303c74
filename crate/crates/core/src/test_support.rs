//! Shared helpers for constructing models whose outputs are forced, used
//! to pin decode and loss behavior in tests.

use crate::model::{forward_with_prefix, ModelParams, Prefix};
use crate::numerics::Tensor;

/// Make every token embed to the same row, so the decoder's hidden state
/// is position- and content-independent (attention mixes equal value rows).
pub(crate) fn make_embeddings_constant(params: &mut ModelParams) {
    let d = params.config.d_model;
    let row: Vec<f32> = params.token_embedding.data[..d].to_vec();
    for r in 0..params.config.vocab_size {
        params.token_embedding.data[r * d..(r + 1) * d].copy_from_slice(&row);
    }
}

/// Final hidden rows for a token sequence, recovered by temporarily
/// swapping in an identity output head (requires vocab ≥ d_model).
pub(crate) fn probe_hidden(params: &ModelParams, tokens: &[u32]) -> Vec<Vec<f32>> {
    let d = params.config.d_model;
    let v = params.config.vocab_size;
    assert!(v >= d, "identity-head probe needs vocab ≥ d_model");
    let mut probe = params.clone();
    let mut head = vec![0.0f32; d * v];
    for r in 0..d {
        head[r * v + r] = 1.0;
    }
    probe.output_head = Tensor::from_vec(&[d, v], head).unwrap();
    let res = forward_with_prefix(&probe, None, tokens, Prefix::None).unwrap();
    (0..tokens.len())
        .map(|i| res.logits.data[i * v..i * v + d].to_vec())
        .collect()
}

/// Output head whose argmax is `target` for any hidden state close to `u`:
/// the target column is u, every other column is −u.
pub(crate) fn rig_head_towards(params: &mut ModelParams, u: &[f32], target: u32) {
    let d = params.config.d_model;
    let v = params.config.vocab_size;
    let mut head = vec![0.0f32; d * v];
    for r in 0..d {
        for c in 0..v {
            head[r * v + c] = if c == target as usize { u[r] } else { -u[r] };
        }
    }
    params.output_head = Tensor::from_vec(&[d, v], head).unwrap();
}

/// Output head that sends hidden row i to logits with `big` on targets[i]
/// and 0 elsewhere, via the dual basis of the probed hidden rows. Drives
/// teacher-forced cross-entropy to ~0 for exactly those rows.
pub(crate) fn rig_head_for_positions(
    params: &mut ModelParams,
    hidden_rows: &[Vec<f32>],
    targets: &[u32],
    big: f64,
) {
    let n = hidden_rows.len();
    assert_eq!(n, targets.len());
    let d = params.config.d_model;
    let v = params.config.vocab_size;
    // Gram matrix G = H·Hᵀ in f64.
    let mut gram = vec![0.0f64; n * n];
    for i in 0..n {
        for j in 0..n {
            gram[i * n + j] = hidden_rows[i]
                .iter()
                .zip(&hidden_rows[j])
                .map(|(&a, &b)| a as f64 * b as f64)
                .sum();
        }
    }
    let ginv = invert(&gram, n);
    // W = Hᵀ·G⁻¹·T with T[i, targets[i]] = big.
    let mut w = vec![0.0f64; d * v];
    for col in 0..n {
        // X[:, targets[col]] += G⁻¹[:, col]·big, then W = Hᵀ X
        for i in 0..n {
            let coeff = ginv[i * n + col] * big;
            if coeff == 0.0 {
                continue;
            }
            let t = targets[col] as usize;
            for r in 0..d {
                w[r * v + t] += hidden_rows[i][r] as f64 * coeff;
            }
        }
    }
    params.output_head =
        Tensor::from_vec(&[d, v], w.into_iter().map(|x| x as f32).collect()).unwrap();
}

/// Plain Gauss-Jordan inverse with partial pivoting, for the tiny Gram
/// systems above.
fn invert(a: &[f64], n: usize) -> Vec<f64> {
    let mut m = vec![0.0f64; n * 2 * n];
    for i in 0..n {
        for j in 0..n {
            m[i * 2 * n + j] = a[i * n + j];
        }
        m[i * 2 * n + n + i] = 1.0;
    }
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&x, &y| {
                m[x * 2 * n + col]
                    .abs()
                    .partial_cmp(&m[y * 2 * n + col].abs())
                    .unwrap()
            })
            .unwrap();
        assert!(m[pivot * 2 * n + col].abs() > 1e-12, "singular Gram matrix");
        if pivot != col {
            for j in 0..2 * n {
                m.swap(col * 2 * n + j, pivot * 2 * n + j);
            }
        }
        let diag = m[col * 2 * n + col];
        for j in 0..2 * n {
            m[col * 2 * n + j] /= diag;
        }
        for row in 0..n {
            if row == col {
                continue;
            }
            let factor = m[row * 2 * n + col];
            if factor == 0.0 {
                continue;
            }
            for j in 0..2 * n {
                m[row * 2 * n + j] -= factor * m[col * 2 * n + j];
            }
        }
    }
    let mut inv = vec![0.0f64; n * n];
    for i in 0..n {
        for j in 0..n {
            inv[i * n + j] = m[i * 2 * n + n + j];
        }
    }
    inv
}
