//! Raw dense matrix kernels. All operate on row-major slices and accumulate
//! into `c`, so callers zero the output when they want a plain product.

use super::real::Real;

/// c[m×n] += a[m×p] · b[p×n]
pub fn gemm_nn<F: Real>(m: usize, p: usize, n: usize, a: &[F], b: &[F], c: &mut [F]) {
    debug_assert_eq!(a.len(), m * p);
    debug_assert_eq!(b.len(), p * n);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let c_row = &mut c[i * n..(i + 1) * n];
        for (kk, &aik) in a[i * p..(i + 1) * p].iter().enumerate() {
            if aik == F::zero() {
                continue;
            }
            let b_row = &b[kk * n..(kk + 1) * n];
            for (cj, &bj) in c_row.iter_mut().zip(b_row) {
                *cj += aik * bj;
            }
        }
    }
}

/// c[m×r] += a[m×q] · b[r×q]ᵀ
pub fn gemm_nt<F: Real>(m: usize, q: usize, r: usize, a: &[F], b: &[F], c: &mut [F]) {
    debug_assert_eq!(a.len(), m * q);
    debug_assert_eq!(b.len(), r * q);
    debug_assert_eq!(c.len(), m * r);
    for i in 0..m {
        let a_row = &a[i * q..(i + 1) * q];
        let c_row = &mut c[i * r..(i + 1) * r];
        for (j, cj) in c_row.iter_mut().enumerate() {
            let b_row = &b[j * q..(j + 1) * q];
            let mut acc = F::zero();
            for (&av, &bv) in a_row.iter().zip(b_row) {
                acc += av * bv;
            }
            *cj += acc;
        }
    }
}

/// c[p×n] += a[m×p]ᵀ · b[m×n]
pub fn gemm_tn<F: Real>(m: usize, p: usize, n: usize, a: &[F], b: &[F], c: &mut [F]) {
    debug_assert_eq!(a.len(), m * p);
    debug_assert_eq!(b.len(), m * n);
    debug_assert_eq!(c.len(), p * n);
    for i in 0..m {
        let b_row = &b[i * n..(i + 1) * n];
        for (kk, &aik) in a[i * p..(i + 1) * p].iter().enumerate() {
            if aik == F::zero() {
                continue;
            }
            let c_row = &mut c[kk * n..(kk + 1) * n];
            for (cj, &bj) in c_row.iter_mut().zip(b_row) {
                *cj += aik * bj;
            }
        }
    }
}
