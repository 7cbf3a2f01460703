//! Row-parallel matrix products used by the dense and sparse layers.

use rayon::prelude::*;

use crate::scalar::{gemm, MatLayout, Scalar};

/// Rows per parallel task; fixed so reductions are order-stable.
const ROW_CHUNK: usize = 256;

/// `c[m x n] (+)= a[m x k] * b`, where `b` is `k x n` described by `lb`.
pub(crate) fn matmul_rows<T: Scalar>(
    a: &[T],
    m: usize,
    k: usize,
    b: &[T],
    lb: MatLayout,
    c: &mut [T],
    accumulate: bool,
) {
    let n = lb.cols;
    debug_assert_eq!(lb.rows, k);
    if m * k * n < 1 << 16 || m <= ROW_CHUNK {
        gemm(
            a,
            MatLayout::row_major(m, k),
            b,
            lb,
            c,
            MatLayout::row_major(m, n),
            accumulate,
        );
        return;
    }
    c.par_chunks_mut(ROW_CHUNK * n)
        .zip(a.par_chunks(ROW_CHUNK * k))
        .for_each(|(cc, aa)| {
            let rows = aa.len() / k.max(1);
            gemm(
                aa,
                MatLayout::row_major(rows, k),
                b,
                lb,
                cc,
                MatLayout::row_major(rows, n),
                accumulate,
            );
        });
}

/// `a^T * b` for row-major `a[m x k]`, `b[m x n]`, giving `k x n`.
/// Partial products over row chunks are summed in chunk order.
pub(crate) fn matmul_at_b<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); k * n];
    if m == 0 {
        return out;
    }
    if m <= ROW_CHUNK || m * k * n < 1 << 16 {
        gemm(
            a,
            MatLayout::transposed(m, k),
            b,
            MatLayout::row_major(m, n),
            &mut out,
            MatLayout::row_major(k, n),
            false,
        );
        return out;
    }
    let partials: Vec<Vec<T>> = a
        .par_chunks(ROW_CHUNK * k)
        .zip(b.par_chunks(ROW_CHUNK * n))
        .map(|(aa, bb)| {
            let rows = aa.len() / k.max(1);
            let mut p = vec![T::zero(); k * n];
            gemm(
                aa,
                MatLayout::transposed(rows, k),
                bb,
                MatLayout::row_major(rows, n),
                &mut p,
                MatLayout::row_major(k, n),
                false,
            );
            p
        })
        .collect();
    for p in partials {
        for (o, v) in out.iter_mut().zip(p) {
            *o += v;
        }
    }
    out
}

/// Column sums of a row-major `m x n` matrix.
pub(crate) fn column_sums<T: Scalar>(a: &[T], n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); n];
    for row in a.chunks(n) {
        for (o, &v) in out.iter_mut().zip(row) {
            *o += v;
        }
    }
    out
}
