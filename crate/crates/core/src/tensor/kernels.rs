//! Dense matrix-product kernels.
//!
//! All products go through one row-oriented kernel: `B` is packed row-major
//! (when it is not already), then every output row accumulates
//! `a[i][k] * b[k][..]` in increasing `k`. The accumulation order of each
//! output element is therefore independent of the operands' memory layout
//! and of how rows are split across threads, so the sequential and parallel
//! paths, and `x·Wᵀ` versus `x·R` with `R` a stored copy of `Wᵀ`, agree
//! bitwise.

use std::borrow::Cow;

use crate::scalar::Scalar;

/// Rows of `k` processed together so the touched part of `B` stays cached.
const K_BLOCK: usize = 128;

/// Below this many multiply-adds the parallel path falls back to sequential.
#[cfg(feature = "parallel")]
const PARALLEL_MIN_WORK: usize = 1 << 16;

/// Strided read-only view of a matrix.
#[derive(Clone, Copy, Debug)]
pub struct MatRef<'a, T> {
    pub data: &'a [T],
    pub rows: usize,
    pub cols: usize,
    pub row_stride: usize,
    pub col_stride: usize,
}

impl<'a, T: Copy> MatRef<'a, T> {
    pub fn row_major(data: &'a [T], rows: usize, cols: usize) -> Self {
        debug_assert_eq!(data.len(), rows * cols);
        MatRef {
            data,
            rows,
            cols,
            row_stride: cols,
            col_stride: 1,
        }
    }

    /// The transposed view; no data moves.
    pub fn t(self) -> Self {
        MatRef {
            data: self.data,
            rows: self.cols,
            cols: self.rows,
            row_stride: self.col_stride,
            col_stride: self.row_stride,
        }
    }

    #[inline(always)]
    pub fn at(&self, i: usize, j: usize) -> T {
        self.data[i * self.row_stride + j * self.col_stride]
    }

    fn is_packed(&self) -> bool {
        self.col_stride == 1 && self.row_stride == self.cols
    }

    fn packed(&self) -> Cow<'a, [T]> {
        if self.is_packed() {
            Cow::Borrowed(&self.data[..self.rows * self.cols])
        } else {
            let mut out = Vec::with_capacity(self.rows * self.cols);
            for i in 0..self.rows {
                out.extend((0..self.cols).map(|j| self.at(i, j)));
            }
            Cow::Owned(out)
        }
    }
}

fn rows_kernel<T: Scalar>(a: MatRef<'_, T>, b: &[T], n: usize, c: &mut [T], first_row: usize) {
    let k = a.cols;
    let zero = T::zero();
    c.fill(zero);
    if n == 0 {
        return;
    }
    let local_rows = c.len() / n;
    let mut kb = 0;
    while kb < k {
        let ke = (kb + K_BLOCK).min(k);
        for r in 0..local_rows {
            let i = first_row + r;
            let crow = &mut c[r * n..(r + 1) * n];
            for kk in kb..ke {
                let av = a.at(i, kk);
                if av == zero {
                    continue;
                }
                let brow = &b[kk * n..(kk + 1) * n];
                for (cv, &bv) in crow.iter_mut().zip(brow) {
                    *cv = *cv + av * bv;
                }
            }
        }
        kb = ke;
    }
}

fn check(a: &MatRef<'_, impl Copy>, b: &MatRef<'_, impl Copy>, c_len: usize) {
    assert_eq!(a.cols, b.rows, "inner dimensions differ");
    assert_eq!(c_len, a.rows * b.cols, "output buffer has the wrong length");
}

/// `c = a · b` on the calling thread.
pub fn gemm_sequential<T: Scalar>(a: MatRef<'_, T>, b: MatRef<'_, T>, c: &mut [T]) {
    check(&a, &b, c.len());
    let packed = b.packed();
    rows_kernel(a, &packed, b.cols, c, 0);
}

/// `c = a · b` with output rows split across the rayon pool.
#[cfg(feature = "parallel")]
pub fn gemm_parallel<T: Scalar>(a: MatRef<'_, T>, b: MatRef<'_, T>, c: &mut [T]) {
    use rayon::prelude::*;

    check(&a, &b, c.len());
    let n = b.cols;
    let threads = rayon::current_num_threads();
    if n == 0 || a.rows < 2 || threads < 2 {
        return gemm_sequential(a, b, c);
    }
    let packed = b.packed();
    let rows_per_chunk = a.rows.div_ceil(threads * 4).max(1);
    c.par_chunks_mut(rows_per_chunk * n)
        .enumerate()
        .for_each(|(chunk, rows)| rows_kernel(a, &packed, n, rows, chunk * rows_per_chunk));
}

/// `c = a · b`, parallel when the `parallel` feature is on and the product is
/// large enough to pay for it. Results are identical either way.
pub fn gemm<T: Scalar>(a: MatRef<'_, T>, b: MatRef<'_, T>, c: &mut [T]) {
    #[cfg(feature = "parallel")]
    {
        if a.rows * a.cols * b.cols >= PARALLEL_MIN_WORK {
            return gemm_parallel(a, b, c);
        }
    }
    gemm_sequential(a, b, c)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(a: MatRef<'_, f64>, b: MatRef<'_, f64>) -> Vec<f64> {
        let mut out = vec![0.0; a.rows * b.cols];
        for i in 0..a.rows {
            for j in 0..b.cols {
                let mut s = 0.0;
                for k in 0..a.cols {
                    s += a.at(i, k) * b.at(k, j);
                }
                out[i * b.cols + j] = s;
            }
        }
        out
    }

    fn pseudo(n: usize, salt: u64) -> Vec<f64> {
        (0..n as u64)
            .map(|i| {
                let x = (i.wrapping_mul(2654435761) ^ salt.wrapping_mul(40503)) % 1000;
                x as f64 / 500.0 - 1.0
            })
            .collect()
    }

    #[test]
    fn strided_operands_match_naive() {
        let (m, k, n) = (7, 300, 5);
        let a = pseudo(m * k, 1);
        let bt = pseudo(n * k, 2);
        let a_ref = MatRef::row_major(&a, m, k);
        let b_ref = MatRef::row_major(&bt, n, k).t();
        let mut c = vec![0.0; m * n];
        gemm_sequential(a_ref, b_ref, &mut c);
        for (x, y) in c.iter().zip(naive(a_ref, b_ref)) {
            assert!((x - y).abs() < 1e-10);
        }
    }

    #[cfg(feature = "parallel")]
    #[test]
    fn parallel_is_bitwise_sequential() {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(3).build().unwrap();
        let (m, k, n) = (37, 200, 19);
        let a = pseudo(m * k, 3);
        let b = pseudo(k * n, 4);
        let (a_ref, b_ref) = (MatRef::row_major(&a, m, k), MatRef::row_major(&b, k, n));
        let mut seq = vec![0.0; m * n];
        let mut par = vec![1.0; m * n];
        gemm_sequential(a_ref, b_ref, &mut seq);
        pool.install(|| gemm_parallel(a_ref, b_ref, &mut par));
        assert_eq!(seq, par);
    }

    #[test]
    fn layout_does_not_change_bits() {
        // b stored directly vs. b reached through the transpose of a stored copy of bᵀ.
        let (m, k, n) = (4, 260, 6);
        let a = pseudo(m * k, 5);
        let b = pseudo(k * n, 6);
        let b_ref = MatRef::row_major(&b, k, n);
        let mut bt = vec![0.0; k * n];
        for i in 0..k {
            for j in 0..n {
                bt[j * k + i] = b[i * n + j];
            }
        }
        let mut direct = vec![0.0; m * n];
        let mut via_t = vec![0.0; m * n];
        gemm(MatRef::row_major(&a, m, k), b_ref, &mut direct);
        gemm(MatRef::row_major(&a, m, k), MatRef::row_major(&bt, n, k).t(), &mut via_t);
        assert_eq!(direct, via_t);
    }
}
