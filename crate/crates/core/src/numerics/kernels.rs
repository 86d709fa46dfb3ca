//! Row-major dense kernels. Every output element is accumulated in the same
//! order whether rows are processed sequentially or on the rayon pool, so the
//! parallel and sequential paths are bit-identical.

use crate::par;

/// `out[m,n] += a[m,k] · b[k,n]`
fn nn_rows(a: &[f64], b: &[f64], k: usize, n: usize, row0: usize, out: &mut [f64]) {
    for (r, out_row) in out.chunks_mut(n).enumerate() {
        let a_row = &a[(row0 + r) * k..(row0 + r + 1) * k];
        for (p, &av) in a_row.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
}

/// `out[m,n] += a[m,k] · b[n,k]ᵀ`
fn nt_rows(a: &[f64], b: &[f64], k: usize, n: usize, row0: usize, out: &mut [f64]) {
    for (r, out_row) in out.chunks_mut(n).enumerate() {
        let a_row = &a[(row0 + r) * k..(row0 + r + 1) * k];
        for (j, o) in out_row.iter_mut().enumerate() {
            let b_row = &b[j * k..(j + 1) * k];
            *o += a_row.iter().zip(b_row).map(|(x, y)| x * y).sum::<f64>();
        }
    }
}

/// `out[m,n] += a[k,m]ᵀ · b[k,n]`
fn tn_rows(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, row0: usize, out: &mut [f64]) {
    for (r, out_row) in out.chunks_mut(n).enumerate() {
        let i = row0 + r;
        for p in 0..k {
            let av = a[p * m + i];
            if av == 0.0 {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum Layout {
    /// a·b
    NN,
    /// a·bᵀ
    NT,
    /// aᵀ·b
    TN,
}

/// Accumulate a single (m × n) product into `out`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm_acc(
    layout: Layout,
    a: &[f64],
    b: &[f64],
    m: usize,
    k: usize,
    n: usize,
    out: &mut [f64],
    parallel: bool,
) {
    debug_assert_eq!(out.len(), m * n);
    // Split into row blocks; each block only touches its own rows of `out`.
    let rows_per_block = if parallel { (m / 64).max(1) } else { m.max(1) };
    par::for_each_chunk(out, rows_per_block * n, parallel, |blk, chunk| {
        let row0 = blk * rows_per_block;
        match layout {
            Layout::NN => nn_rows(a, b, k, n, row0, chunk),
            Layout::NT => nt_rows(a, b, k, n, row0, chunk),
            Layout::TN => tn_rows(a, b, m, k, n, row0, chunk),
        }
    });
}

/// Plain 2-D product on the calling thread.
pub fn matmul_seq(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    gemm_acc(Layout::NN, a, b, m, k, n, &mut out, false);
    out
}

/// Row-parallel 2-D product (sequential without the `parallel` feature).
pub fn matmul_par(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    gemm_acc(Layout::NN, a, b, m, k, n, &mut out, cfg!(feature = "parallel"));
    out
}
