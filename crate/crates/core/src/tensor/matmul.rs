//! Dense matmul kernels.
//!
//! Both the sequential and the rayon paths compute every output element by
//! accumulating over the inner dimension in ascending order, so results are
//! bitwise identical regardless of thread count. The parallel path only
//! distributes whole output rows, which are independent.

use super::scalar::Scalar;

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Work threshold (multiply-adds) below which the parallel path falls back to
/// the sequential kernel. Tiny matrices lose more to scheduling than they gain.
#[cfg(feature = "parallel")]
const PAR_MIN_FLOPS: usize = 64 * 64 * 64;

#[inline]
fn row_update<S: Scalar>(out_row: &mut [S], a_row: &[S], b: &[S], k: usize, p: usize) {
    for t in 0..k {
        let av = a_row[t];
        let b_row = &b[t * p..t * p + p];
        for j in 0..p {
            out_row[j] += av * b_row[j];
        }
    }
}

/// `out += a * b` with `a: n x k`, `b: k x p`, `out: n x p`.
pub(crate) fn matmul_acc_seq<S: Scalar>(a: &[S], b: &[S], n: usize, k: usize, p: usize, out: &mut [S]) {
    debug_assert_eq!(a.len(), n * k);
    debug_assert_eq!(b.len(), k * p);
    debug_assert_eq!(out.len(), n * p);
    for i in 0..n {
        row_update(&mut out[i * p..i * p + p], &a[i * k..i * k + k], b, k, p);
    }
}

/// `out += a * transpose(b)` with `a: n x k`, `b: p x k`, `out: n x p`.
pub(crate) fn matmul_nt_acc_seq<S: Scalar>(a: &[S], b: &[S], n: usize, k: usize, p: usize, out: &mut [S]) {
    debug_assert_eq!(a.len(), n * k);
    debug_assert_eq!(b.len(), p * k);
    debug_assert_eq!(out.len(), n * p);
    for i in 0..n {
        let a_row = &a[i * k..i * k + k];
        let out_row = &mut out[i * p..i * p + p];
        for j in 0..p {
            let b_row = &b[j * k..j * k + k];
            let mut s = S::ZERO;
            for t in 0..k {
                s += a_row[t] * b_row[t];
            }
            out_row[j] += s;
        }
    }
}

pub(crate) fn matmul_acc<S: Scalar>(a: &[S], b: &[S], n: usize, k: usize, p: usize, out: &mut [S]) {
    #[cfg(feature = "parallel")]
    {
        if n > 1 && n * k * p >= PAR_MIN_FLOPS {
            out.par_chunks_mut(p).enumerate().for_each(|(i, out_row)| {
                row_update(out_row, &a[i * k..i * k + k], b, k, p);
            });
            return;
        }
    }
    matmul_acc_seq(a, b, n, k, p, out);
}

pub(crate) fn matmul_nt_acc<S: Scalar>(a: &[S], b: &[S], n: usize, k: usize, p: usize, out: &mut [S]) {
    #[cfg(feature = "parallel")]
    {
        if n > 1 && n * k * p >= PAR_MIN_FLOPS {
            out.par_chunks_mut(p).enumerate().for_each(|(i, out_row)| {
                let a_row = &a[i * k..i * k + k];
                for j in 0..p {
                    let b_row = &b[j * k..j * k + k];
                    let mut s = S::ZERO;
                    for t in 0..k {
                        s += a_row[t] * b_row[t];
                    }
                    out_row[j] += s;
                }
            });
            return;
        }
    }
    matmul_nt_acc_seq(a, b, n, k, p, out);
}

pub(crate) fn transpose_copy<S: Scalar>(a: &[S], n: usize, k: usize) -> Vec<S> {
    let mut out = vec![S::ZERO; n * k];
    for i in 0..n {
        for t in 0..k {
            out[t * n + i] = a[i * k + t];
        }
    }
    out
}
