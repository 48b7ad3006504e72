//! Matrix-product kernels shared by forward and backward passes.
//!
//! All three variants accumulate each output element in the same index order
//! regardless of thread count, so results are bit-identical whether rayon
//! splits the row range or not.

use rayon::prelude::*;

/// Work threshold (multiply-adds) below which threading costs more than it saves.
const PAR_THRESHOLD: usize = 1 << 16;

/// out[m x n] = a[m x k] @ b[k x n]. `out` must be zeroed by the caller.
pub(crate) fn matmul_nn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    let row = |i: usize, out_row: &mut [f64]| {
        let a_row = &a[i * k..(i + 1) * k];
        for (kk, &aik) in a_row.iter().enumerate() {
            let b_row = &b[kk * n..(kk + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += aik * bv;
            }
        }
    };
    if m * k * n >= PAR_THRESHOLD && m > 1 {
        out.par_chunks_mut(n).enumerate().for_each(|(i, r)| row(i, r));
    } else {
        for (i, r) in out.chunks_mut(n).enumerate() {
            row(i, r);
        }
    }
}

/// out[m x k] = a[m x n] @ b[k x n]^T. `out` must be zeroed by the caller.
pub(crate) fn matmul_nt(a: &[f64], b: &[f64], m: usize, n: usize, k: usize, out: &mut [f64]) {
    debug_assert_eq!(a.len(), m * n);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * k);
    let row = |i: usize, out_row: &mut [f64]| {
        let a_row = &a[i * n..(i + 1) * n];
        for (kk, o) in out_row.iter_mut().enumerate() {
            let b_row = &b[kk * n..(kk + 1) * n];
            let mut acc = 0.0;
            for (&av, &bv) in a_row.iter().zip(b_row) {
                acc += av * bv;
            }
            *o += acc;
        }
    };
    if m * k * n >= PAR_THRESHOLD && m > 1 {
        out.par_chunks_mut(k).enumerate().for_each(|(i, r)| row(i, r));
    } else {
        for (i, r) in out.chunks_mut(k).enumerate() {
            row(i, r);
        }
    }
}

/// out[k x n] = a[m x k]^T @ b[m x n]. `out` must be zeroed by the caller.
///
/// Each output row kk accumulates over i in ascending order, so the result is
/// independent of how the kk range is partitioned.
pub(crate) fn matmul_tn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    debug_assert_eq!(out.len(), k * n);
    let row = |kk: usize, out_row: &mut [f64]| {
        for i in 0..m {
            let aik = a[i * k + kk];
            let b_row = &b[i * n..(i + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += aik * bv;
            }
        }
    };
    if m * k * n >= PAR_THRESHOLD && k > 1 {
        out.par_chunks_mut(n).enumerate().for_each(|(kk, r)| row(kk, r));
    } else {
        for (kk, r) in out.chunks_mut(n).enumerate() {
            row(kk, r);
        }
    }
}
