//! Dense tensor arithmetic with reverse-mode automatic differentiation,
//! enough to train the toy transformer, plus a finite-difference oracle.

pub mod gemm;
mod gradcheck;
mod graph;
mod real;
mod tensor;

pub use gradcheck::{grad_check, ScalarFn, SumOf};
pub use graph::{Graph, Reduction, Var};
pub use real::Real;
pub use tensor::Tensor;

/// Forward rotary rotation on a raw buffer, shared with `model::rope_apply`.
pub(crate) fn rope_rotate_public(
    data: &mut [f32],
    d: usize,
    head_dim: usize,
    positions: &[usize],
    theta: f64,
) {
    graph::rope_rotate(data, d, head_dim, positions, theta, false);
}
