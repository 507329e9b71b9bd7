//! Dense row-major n-dimensional arrays. This is the plain value type used
//! for parameters, datasets, and checkpoints; gradient bookkeeping lives on
//! tape nodes (see [`crate::tape`]), which carry the same data layout plus
//! `requires_grad` / `grad` state.

use crate::scalar::Scalar;

/// Shape-checked row-major buffer.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    /// Panics if `data.len()` does not equal the product of `shape` extents.
    pub fn new(shape: &[usize], data: Vec<T>) -> Self {
        let numel: usize = shape.iter().product();
        assert_eq!(
            numel,
            data.len(),
            "tensor shape {:?} implies {} elements but {} were provided",
            shape,
            numel,
            data.len()
        );
        Tensor { shape: shape.to_vec(), data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor::full(shape, T::zero())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let numel = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![value; numel] }
    }

    /// Build from a function of the flat (row-major) index.
    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        let numel: usize = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: (0..numel).map(|i| f(i)).collect() }
    }

    pub fn scalar(value: T) -> Self {
        Tensor { shape: vec![1], data: vec![value] }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    /// Flat offset of a multi-index; panics on rank or bound violations.
    pub fn offset(&self, idx: &[usize]) -> usize {
        assert_eq!(idx.len(), self.shape.len(), "index rank {} vs tensor rank {}", idx.len(), self.shape.len());
        let mut off = 0;
        for (d, (&i, &n)) in idx.iter().zip(&self.shape).enumerate() {
            assert!(i < n, "index {} out of bounds {} on axis {}", i, n, d);
            off = off * n + i;
        }
        off
    }

    pub fn at(&self, idx: &[usize]) -> T {
        self.data[self.offset(idx)]
    }

    pub fn set(&mut self, idx: &[usize], value: T) {
        let off = self.offset(idx);
        self.data[off] = value;
    }

    /// Same data reinterpreted under a new shape with equal element count.
    pub fn reshaped(mut self, shape: &[usize]) -> Self {
        let numel: usize = shape.iter().product();
        assert_eq!(numel, self.data.len(), "reshape {:?} -> {:?} changes element count", self.shape, shape);
        self.shape = shape.to_vec();
        self
    }

    /// Elementwise conversion between float widths.
    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| U::lit(v.to_f64())).collect(),
        }
    }
}

/// Row-major strides for a shape.
pub fn strides_of(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1usize; shape.len()];
    for d in (0..shape.len().saturating_sub(1)).rev() {
        s[d] = s[d + 1] * shape[d + 1];
    }
    s
}

/// Worker-thread budget for the matmul kernels. Reads `HSTMRF_THREADS` once;
/// unset, unparsable, or `0` all mean "one per available core".
pub fn num_threads() -> usize {
    static THREADS: std::sync::OnceLock<usize> = std::sync::OnceLock::new();
    *THREADS.get_or_init(|| {
        let fallback = || std::thread::available_parallelism().map_or(1, |n| n.get());
        match std::env::var("HSTMRF_THREADS").ok().and_then(|s| s.trim().parse::<usize>().ok()) {
            Some(0) | None => fallback(),
            Some(n) => n.min(256),
        }
    })
}

/// Threads worth spawning for `work` multiply-adds split across `rows`
/// output rows: never more than the budget, the rows, or one per ~64k ops.
fn plan_threads(work: usize, rows: usize) -> usize {
    num_threads().min(rows).min(work >> 16).max(1)
}

/// Run `body(first_row, out_chunk)` over row-chunks of `out`, in parallel
/// when the budget allows. Each output row is written by exactly one thread
/// with the same per-element accumulation order as the serial loop, so
/// results are bit-identical for every thread count.
fn for_row_chunks<T: Scalar>(
    m: usize,
    n: usize,
    k: usize,
    out: &mut [T],
    body: impl Fn(usize, &mut [T]) + Send + Sync,
) {
    let threads = plan_threads(m * n * k, m);
    if threads <= 1 {
        body(0, out);
        return;
    }
    let rows_per = m.div_ceil(threads);
    std::thread::scope(|scope| {
        for (ci, chunk) in out.chunks_mut(rows_per * n).enumerate() {
            let body = &body;
            scope.spawn(move || body(ci * rows_per, chunk));
        }
    });
}

/// `a @ b` for row-major `a: (m,k)`, `b: (k,n)`, accumulated into `out: (m,n)`.
/// ikj loop order keeps the inner loop contiguous in both `b` and `out`.
pub fn matmul_accum<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize, out: &mut [T]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for_row_chunks(m, n, k, out, |i0, chunk| {
        for (r, orow) in chunk.chunks_mut(n).enumerate() {
            let i = i0 + r;
            let arow = &a[i * k..(i + 1) * k];
            for (kk, &aik) in arow.iter().enumerate() {
                if aik == T::zero() {
                    continue;
                }
                let brow = &b[kk * n..(kk + 1) * n];
                for j in 0..n {
                    orow[j] = orow[j] + aik * brow[j];
                }
            }
        }
    });
}

/// `a^T @ b` for `a: (k,m)`, `b: (k,n)`, accumulated into `out: (m,n)`.
pub fn matmul_tn_accum<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize, out: &mut [T]) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for_row_chunks(m, n, k, out, |i0, chunk| {
        let rows = chunk.len() / n;
        for kk in 0..k {
            let arow = &a[kk * m..(kk + 1) * m];
            let brow = &b[kk * n..(kk + 1) * n];
            for r in 0..rows {
                let aki = arow[i0 + r];
                if aki == T::zero() {
                    continue;
                }
                let orow = &mut chunk[r * n..(r + 1) * n];
                for j in 0..n {
                    orow[j] = orow[j] + aki * brow[j];
                }
            }
        }
    });
}

/// `a @ b^T` for `a: (m,k)`, `b: (n,k)`, accumulated into `out: (m,n)`.
pub fn matmul_nt_accum<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize, out: &mut [T]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(out.len(), m * n);
    for_row_chunks(m, n, k, out, |i0, chunk| {
        for (r, orow) in chunk.chunks_mut(n).enumerate() {
            let arow = &a[(i0 + r) * k..(i0 + r + 1) * k];
            for j in 0..n {
                let brow = &b[j * k..(j + 1) * k];
                let mut acc = T::zero();
                for kk in 0..k {
                    acc = acc + arow[kk] * brow[kk];
                }
                orow[j] = orow[j] + acc;
            }
        }
    });
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_and_indexing() {
        let t = Tensor::<f64>::from_fn(&[2, 3], |i| i as f64);
        assert_eq!(t.numel(), 6);
        assert_eq!(t.at(&[1, 2]), 5.0);
        assert_eq!(strides_of(&[2, 3, 4]), vec![12, 4, 1]);
        assert_eq!(strides_of(&[]), Vec::<usize>::new());
    }

    #[test]
    #[should_panic(expected = "implies 6 elements")]
    fn mismatched_data_len_panics() {
        let _ = Tensor::<f32>::new(&[2, 3], vec![0.0; 5]);
    }

    #[test]
    fn matmul_kernels_agree() {
        // a: (2,3), b: (3,2) with known product [[22,28],[49,64]].
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let b = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let mut out = [0.0f64; 4];
        matmul_accum(&a, &b, 2, 3, 2, &mut out);
        assert_eq!(out, [22.0, 28.0, 49.0, 64.0]);

        // a^T path: feed a transposed (3,2) layout and expect the same product.
        let at = [1.0, 4.0, 2.0, 5.0, 3.0, 6.0];
        let mut out_t = [0.0f64; 4];
        matmul_tn_accum(&at, &b, 2, 3, 2, &mut out_t);
        assert_eq!(out_t, out);

        // b^T path: feed b transposed (2,3) layout.
        let bt = [1.0, 3.0, 5.0, 2.0, 4.0, 6.0];
        let mut out_nt = [0.0f64; 4];
        matmul_nt_accum(&a, &bt, 2, 3, 2, &mut out_nt);
        assert_eq!(out_nt, out);
    }

    #[test]
    fn cast_round_trips_f32_values() {
        let t = Tensor::<f32>::new(&[3], vec![0.5, -1.25, 3.0]);
        let wide: Tensor<f64> = t.cast();
        let back: Tensor<f32> = wide.cast();
        assert_eq!(t, back);
    }
}
