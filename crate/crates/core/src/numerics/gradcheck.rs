//! Finite-difference gradient oracle.
//!
//! Production training runs in `f32`; checking autograd against central
//! differences at 1e-3 needs more headroom than `f32` forward noise allows,
//! so the oracle instantiates the same generic graph code at `f64` for both
//! the autograd pass and the difference quotients.

use super::graph::{Graph, Var};
use super::real::Real;
use super::tensor::Tensor;
use crate::{Error, Result};

/// A scalar-valued tensor function that can be built on a graph of any
/// scalar type. Implementations capture whatever fixed inputs they need.
pub trait ScalarFn {
    fn eval<F: Real>(&self, g: &mut Graph<F>, x: Var) -> Result<Var>;
}

/// Max over components of |autograd − central difference| relative error,
/// with the difference step scaled per component as `h·(1+|x_i|)`.
pub fn grad_check<S: ScalarFn>(f: &S, x: &Tensor<f32>, h: f64) -> Result<f64> {
    if !(1e-6..=1e-2).contains(&h) {
        return Err(Error::Contract(format!(
            "grad_check step {h} outside [1e-6, 1e-2]"
        )));
    }

    let x64: Vec<f64> = x.data.iter().map(|&v| v as f64).collect();

    // Autograd pass.
    let mut g = Graph::<f64>::new();
    let leaf = Tensor::<f64> {
        dims: x.dims.clone(),
        data: x64.clone(),
        requires_grad: true,
        grad: None,
    };
    let xv = g.leaf(leaf);
    let out = f.eval(&mut g, xv)?;
    if g.value(out).numel() != 1 {
        return Err(Error::Contract(format!(
            "grad_check needs a scalar function, got output shape {:?}",
            g.value(out).dims
        )));
    }
    g.backward(out)?;
    let autograd: Vec<f64> = match g.grad(xv) {
        Some(buf) => buf.to_vec(),
        None => vec![0.0; x64.len()],
    };

    // Central differences.
    let mut max_rel = 0.0f64;
    let mut probe = x64.clone();
    for i in 0..probe.len() {
        let step = h * (1.0 + probe[i].abs());
        let orig = probe[i];
        probe[i] = orig + step;
        let fp = eval_scalar(f, &x.dims, &probe)?;
        probe[i] = orig - step;
        let fm = eval_scalar(f, &x.dims, &probe)?;
        probe[i] = orig;
        let central = (fp - fm) / (2.0 * step);
        let rel = (autograd[i] - central).abs() / (central.abs() + 1e-8);
        max_rel = max_rel.max(rel);
    }
    Ok(max_rel)
}

fn eval_scalar<S: ScalarFn>(f: &S, dims: &[usize], data: &[f64]) -> Result<f64> {
    let mut g = Graph::<f64>::new();
    let xv = g.leaf(Tensor::<f64> {
        dims: dims.to_vec(),
        data: data.to_vec(),
        requires_grad: false,
        grad: None,
    });
    let out = f.eval(&mut g, xv)?;
    if g.value(out).numel() != 1 {
        return Err(Error::Contract("grad_check needs a scalar function".into()));
    }
    Ok(g.value(out).data[0])
}

/// f(x) = Σ x, the exact linear case.
pub struct SumOf;

impl ScalarFn for SumOf {
    fn eval<F: Real>(&self, g: &mut Graph<F>, x: Var) -> Result<Var> {
        g.sum(x)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::graph::Reduction;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;

    fn rand_tensor(dims: &[usize], seed: u64, span: f32) -> Tensor<f32> {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let n: usize = dims.iter().product();
        let data: Vec<f32> = (0..n).map(|_| rng.gen_range(-span..span)).collect();
        Tensor::from_vec(dims, data).unwrap()
    }

    /// Scalarize any [r×c] output with a fixed random weighting so the
    /// check is not vacuous for ops whose plain sum has zero gradient.
    struct Weighted<O>(O, Tensor<f32>);

    trait OpUnderTest {
        fn apply<F: Real>(&self, g: &mut Graph<F>, x: Var) -> Result<Var>;
    }

    impl<O: OpUnderTest> ScalarFn for Weighted<O> {
        fn eval<F: Real>(&self, g: &mut Graph<F>, x: Var) -> Result<Var> {
            let y = self.0.apply(g, x)?;
            let w = g.insert_frozen(&self.1);
            let wy = g.mul(y, w)?;
            g.sum(wy)
        }
    }

    struct MatmulBy(Tensor<f32>);
    impl OpUnderTest for MatmulBy {
        fn apply<F: Real>(&self, g: &mut Graph<F>, x: Var) -> Result<Var> {
            let b = g.insert_frozen(&self.0);
            g.matmul(x, b)
        }
    }

    struct MatmulNtBy(Tensor<f32>);
    impl OpUnderTest for MatmulNtBy {
        fn apply<F: Real>(&self, g: &mut Graph<F>, x: Var) -> Result<Var> {
            let b = g.insert_frozen(&self.0);
            g.matmul_nt(x, b)
        }
    }

    struct SiluOp;
    impl OpUnderTest for SiluOp {
        fn apply<F: Real>(&self, g: &mut Graph<F>, x: Var) -> Result<Var> {
            g.silu(x)
        }
    }

    struct MulBy(Tensor<f32>);
    impl OpUnderTest for MulBy {
        fn apply<F: Real>(&self, g: &mut Graph<F>, x: Var) -> Result<Var> {
            let b = g.insert_frozen(&self.0);
            g.mul(x, b)
        }
    }

    struct SoftmaxOp;
    impl OpUnderTest for SoftmaxOp {
        fn apply<F: Real>(&self, g: &mut Graph<F>, x: Var) -> Result<Var> {
            g.softmax_lastdim(x)
        }
    }

    struct RmsNormX(Tensor<f32>);
    impl OpUnderTest for RmsNormX {
        fn apply<F: Real>(&self, g: &mut Graph<F>, x: Var) -> Result<Var> {
            let w = g.insert_frozen(&self.0);
            g.rms_norm(x, w, 1e-5)
        }
    }

    struct RmsNormW(Tensor<f32>);
    impl OpUnderTest for RmsNormW {
        fn apply<F: Real>(&self, g: &mut Graph<F>, x: Var) -> Result<Var> {
            let inp = g.insert_frozen(&self.0);
            g.rms_norm(inp, x, 1e-5)
        }
    }

    struct RopeOp;
    impl OpUnderTest for RopeOp {
        fn apply<F: Real>(&self, g: &mut Graph<F>, x: Var) -> Result<Var> {
            g.rope(x, 4, &[2, 7, 11], 10000.0)
        }
    }

    /// Attention with x spliced into the q, k, or v slot.
    struct AttnSlot {
        q: Tensor<f32>,
        k: Tensor<f32>,
        v: Tensor<f32>,
        slot: usize,
        prefix: usize,
    }
    impl OpUnderTest for AttnSlot {
        fn apply<F: Real>(&self, g: &mut Graph<F>, x: Var) -> Result<Var> {
            let q = if self.slot == 0 { x } else { g.insert_frozen(&self.q) };
            let k = if self.slot == 1 { x } else { g.insert_frozen(&self.k) };
            let v = if self.slot == 2 { x } else { g.insert_frozen(&self.v) };
            g.attention(q, k, v, 2, self.prefix)
        }
    }

    struct EmbedOp;
    impl OpUnderTest for EmbedOp {
        fn apply<F: Real>(&self, g: &mut Graph<F>, x: Var) -> Result<Var> {
            g.embed_lookup(x, &[1, 0, 1, 3])
        }
    }

    struct ConcatSlice(Tensor<f32>);
    impl OpUnderTest for ConcatSlice {
        fn apply<F: Real>(&self, g: &mut Graph<F>, x: Var) -> Result<Var> {
            let other = g.insert_frozen(&self.0);
            let c = g.concat_rows(x, other)?;
            g.slice_rows(c, 1, 2)
        }
    }

    struct CrossEntropyFn;
    impl ScalarFn for CrossEntropyFn {
        fn eval<F: Real>(&self, g: &mut Graph<F>, x: Var) -> Result<Var> {
            g.cross_entropy(x, &[3, 0, 7, 5], Reduction::Sum)
        }
    }

    #[test]
    fn sum_is_exact() {
        let x = rand_tensor(&[3, 4], 1, 2.0);
        let err = grad_check(&SumOf, &x, 1e-4).unwrap();
        assert!(err < 1e-10, "sum grad error {err}");
    }

    #[test]
    fn cross_entropy_matches_finite_differences() {
        for seed in 0..20u64 {
            let x = rand_tensor(&[4, 8], seed, 3.0);
            let err = grad_check(&CrossEntropyFn, &x, 1e-4).unwrap();
            assert!(err <= 1e-3, "seed {seed}: cross_entropy grad error {err}");
        }
    }

    fn check<S: ScalarFn>(name: &str, seed: u64, f: &S, x: &Tensor<f32>) {
        let err = grad_check(f, x, 1e-4).unwrap();
        assert!(err <= 1e-3, "seed {seed}, op {name}: grad error {err}");
    }

    #[test]
    fn every_op_passes_grad_check_across_seeds() {
        for seed in 0..20u64 {
            let w34 = rand_tensor(&[3, 4], seed + 900, 1.0);
            let w32 = rand_tensor(&[3, 2], seed + 901, 1.0);
            let w44 = rand_tensor(&[4, 4], seed + 903, 1.0);
            let w23 = rand_tensor(&[2, 3], seed + 904, 1.0);

            check(
                "matmul",
                seed,
                &Weighted(MatmulBy(rand_tensor(&[4, 2], seed, 1.0)), w32.clone()),
                &rand_tensor(&[3, 4], seed + 1, 1.5),
            );
            check(
                "matmul_nt",
                seed,
                &Weighted(MatmulNtBy(rand_tensor(&[2, 4], seed + 2, 1.0)), w32),
                &rand_tensor(&[3, 4], seed + 3, 1.5),
            );
            check(
                "mul",
                seed,
                &Weighted(MulBy(rand_tensor(&[3, 4], seed + 4, 1.0)), w34.clone()),
                &rand_tensor(&[3, 4], seed + 5, 1.5),
            );
            check(
                "silu",
                seed,
                &Weighted(SiluOp, w34.clone()),
                &rand_tensor(&[3, 4], seed + 6, 2.0),
            );
            check(
                "softmax",
                seed,
                &Weighted(SoftmaxOp, w34.clone()),
                &rand_tensor(&[3, 4], seed + 7, 3.0),
            );
            check(
                "rms_norm_x",
                seed,
                &Weighted(RmsNormX(rand_tensor(&[4], seed + 8, 1.0)), w34.clone()),
                &rand_tensor(&[3, 4], seed + 9, 2.0),
            );
            check(
                "rms_norm_w",
                seed,
                &Weighted(RmsNormW(rand_tensor(&[3, 4], seed + 10, 2.0)), w34.clone()),
                &rand_tensor(&[4], seed + 11, 1.0),
            );
            check(
                "rope",
                seed,
                &Weighted(RopeOp, w34.clone()),
                &rand_tensor(&[3, 4], seed + 12, 2.0),
            );
            for slot in 0..3usize {
                let f = Weighted(
                    AttnSlot {
                        q: rand_tensor(&[3, 4], seed + 13, 1.0),
                        k: rand_tensor(&[4, 4], seed + 14, 1.0),
                        v: rand_tensor(&[4, 4], seed + 15, 1.0),
                        slot,
                        prefix: 1,
                    },
                    w34.clone(),
                );
                let x = if slot == 0 {
                    rand_tensor(&[3, 4], seed + 16 + slot as u64, 1.0)
                } else {
                    rand_tensor(&[4, 4], seed + 16 + slot as u64, 1.0)
                };
                check(&format!("attention_slot{slot}"), seed, &f, &x);
            }
            check(
                "embed_lookup",
                seed,
                &Weighted(EmbedOp, w44),
                &rand_tensor(&[5, 4], seed + 25, 1.0),
            );
            check(
                "concat_slice",
                seed,
                &Weighted(ConcatSlice(rand_tensor(&[2, 3], seed + 26, 1.0)), w23),
                &rand_tensor(&[2, 3], seed + 27, 1.0),
            );
        }
    }

    #[test]
    fn rejects_out_of_range_step() {
        let x = rand_tensor(&[2], 0, 1.0);
        assert!(grad_check(&SumOf, &x, 0.5).is_err());
    }

    #[test]
    fn rejects_non_scalar_function() {
        struct Identity;
        impl ScalarFn for Identity {
            fn eval<F: Real>(&self, _g: &mut Graph<F>, x: Var) -> Result<Var> {
                Ok(x)
            }
        }
        let x = rand_tensor(&[2, 2], 0, 1.0);
        assert!(matches!(
            grad_check(&Identity, &x, 1e-4),
            Err(Error::Contract(_))
        ));
    }
}
