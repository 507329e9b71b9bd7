//! Matrix multiplication (plain and batched) and row gathering.

use super::{Op, Tape, TensorId};
use crate::scalar::Scalar;
use crate::tensor::{matmul_accum, matmul_nt_accum, matmul_tn_accum};

/// How the `b` operand of a matmul is shared across the batch of `a`.
struct MatShape {
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    shared_b: bool,
}

fn resolve_shapes(a: &[usize], b: &[usize]) -> MatShape {
    assert!(a.len() >= 2, "matmul lhs must have rank >= 2, got {a:?}");
    let (m, k) = (a[a.len() - 2], a[a.len() - 1]);
    if b.len() == 2 {
        assert_eq!(k, b[0], "matmul inner dims disagree: lhs {a:?} vs rhs {b:?}");
        MatShape { batch: a[..a.len() - 2].iter().product(), m, k, n: b[1], shared_b: true }
    } else {
        assert_eq!(a.len(), b.len(), "matmul rhs must be rank 2 or match lhs rank: lhs {a:?} vs rhs {b:?}");
        assert_eq!(&a[..a.len() - 2], &b[..b.len() - 2], "matmul batch dims disagree: lhs {a:?} vs rhs {b:?}");
        assert_eq!(k, b[b.len() - 2], "matmul inner dims disagree: lhs {a:?} vs rhs {b:?}");
        MatShape { batch: a[..a.len() - 2].iter().product(), m, k, n: b[b.len() - 1], shared_b: false }
    }
}

impl<T: Scalar> Tape<T> {
    /// `a @ b`. `a` is `(..., m, k)`; `b` is either `(k, n)` (shared across
    /// the batch, the usual weight case) or `(..., k, n)` with matching
    /// leading extents (per-batch, the attention case).
    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> TensorId {
        let ms = resolve_shapes(&self.node(a).shape, &self.node(b).shape);
        let mut out = vec![T::zero(); ms.batch * ms.m * ms.n];
        {
            let (da, db) = (&self.node(a).data, &self.node(b).data);
            for i in 0..ms.batch {
                let a_i = &da[i * ms.m * ms.k..(i + 1) * ms.m * ms.k];
                let b_i = if ms.shared_b { &db[..] } else { &db[i * ms.k * ms.n..(i + 1) * ms.k * ms.n] };
                matmul_accum(a_i, b_i, ms.m, ms.k, ms.n, &mut out[i * ms.m * ms.n..(i + 1) * ms.m * ms.n]);
            }
        }
        let mut shape = self.node(a).shape.clone();
        let r = shape.len();
        shape[r - 1] = ms.n;
        let rg = self.any_requires_grad(&[a, b]);
        self.push("matmul", out, shape, rg, Op::MatMul { a, b })
    }

    /// Select rows of `table` by index; `(R, C)` gathered to `(idx.len(), C)`.
    /// Backward scatter-adds, so repeated indices accumulate.
    pub fn gather_rows(&mut self, table: TensorId, idx: &[usize]) -> TensorId {
        let shape = self.node(table).shape.clone();
        assert_eq!(shape.len(), 2, "gather_rows expects a rank-2 table, got {shape:?}");
        let (rows, cols) = (shape[0], shape[1]);
        let mut out = vec![T::zero(); idx.len() * cols];
        {
            let data = &self.node(table).data;
            for (o, &r) in idx.iter().enumerate() {
                assert!(r < rows, "gather_rows index {r} out of bounds {rows}");
                out[o * cols..(o + 1) * cols].copy_from_slice(&data[r * cols..(r + 1) * cols]);
            }
        }
        let rg = self.node(table).requires_grad;
        self.push("gather_rows", out, vec![idx.len(), cols], rg, Op::GatherRows { table, idx: idx.to_vec() })
    }
}

pub(crate) fn backward_matmul<T: Scalar>(tape: &mut Tape<T>, a: TensorId, b: TensorId, g: &[T]) {
    let ms = resolve_shapes(&tape.node(a).shape, &tape.node(b).shape);
    if tape.node(a).requires_grad {
        // dA_i = G_i @ B_i^T
        let db = tape.node(b).data.clone();
        let mut da = vec![T::zero(); ms.batch * ms.m * ms.k];
        for i in 0..ms.batch {
            let g_i = &g[i * ms.m * ms.n..(i + 1) * ms.m * ms.n];
            let b_i = if ms.shared_b { &db[..] } else { &db[i * ms.k * ms.n..(i + 1) * ms.k * ms.n] };
            matmul_nt_accum(g_i, b_i, ms.m, ms.n, ms.k, &mut da[i * ms.m * ms.k..(i + 1) * ms.m * ms.k]);
        }
        tape.add_grad_owned(a, da);
    }
    if tape.node(b).requires_grad {
        // dB_i = A_i^T @ G_i, summed over the batch when B is shared.
        let da = tape.node(a).data.clone();
        let mut dbg = vec![T::zero(); tape.node(b).data.len()];
        for i in 0..ms.batch {
            let a_i = &da[i * ms.m * ms.k..(i + 1) * ms.m * ms.k];
            let g_i = &g[i * ms.m * ms.n..(i + 1) * ms.m * ms.n];
            let slot = if ms.shared_b { &mut dbg[..] } else { &mut dbg[i * ms.k * ms.n..(i + 1) * ms.k * ms.n] };
            matmul_tn_accum(a_i, g_i, ms.k, ms.m, ms.n, slot);
        }
        tape.add_grad_owned(b, dbg);
    }
}

pub(crate) fn backward_gather_rows<T: Scalar>(tape: &mut Tape<T>, table: TensorId, idx: &[usize], g: &[T]) {
    if !tape.node(table).requires_grad {
        return;
    }
    let cols = tape.node(table).shape[1];
    let mut dt = vec![T::zero(); tape.node(table).data.len()];
    for (o, &r) in idx.iter().enumerate() {
        for c in 0..cols {
            dt[r * cols + c] = dt[r * cols + c] + g[o * cols + c];
        }
    }
    tape.add_grad_owned(table, dt);
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn identity_is_neutral() {
        let mut tape = Tape::<f64>::new(0);
        let a = tape.constant(Tensor::new(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]));
        let eye = tape.constant(Tensor::new(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]));
        let y = tape.matmul(a, eye);
        assert_eq!(tape.data(y), tape.data(a));
    }

    #[test]
    fn known_product() {
        // [[1,2],[3,4]] @ [1,1]^T = [3, 7]
        let mut tape = Tape::<f64>::new(0);
        let a = tape.constant(Tensor::new(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]));
        let b = tape.constant(Tensor::new(&[2, 1], vec![1.0, 1.0]));
        let y = tape.matmul(a, b);
        assert_eq!(tape.shape(y), &[2, 1]);
        assert_eq!(tape.data(y), &[3.0, 7.0]);
    }

    #[test]
    fn grads_match_closed_form() {
        // loss = sum(a @ b): da = ones @ b^T, db = a^T @ ones.
        let mut tape = Tape::<f64>::new(0);
        let a = tape.leaf(Tensor::new(&[2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]), true);
        let b = tape.leaf(Tensor::new(&[3, 2], vec![7.0, 8.0, 9.0, 10.0, 11.0, 12.0]), true);
        let y = tape.matmul(a, b);
        let loss = tape.sum(y);
        tape.backward(loss);
        assert_eq!(tape.grad(a).unwrap(), &[15.0, 19.0, 23.0, 15.0, 19.0, 23.0]);
        assert_eq!(tape.grad(b).unwrap(), &[5.0, 5.0, 7.0, 7.0, 9.0, 9.0]);
    }

    #[test]
    fn batched_with_shared_rhs_sums_weight_grad() {
        let mut tape = Tape::<f64>::new(0);
        let a = tape.leaf(Tensor::from_fn(&[2, 1, 2], |i| i as f64 + 1.0), true);
        let w = tape.leaf(Tensor::new(&[2, 1], vec![1.0, -1.0]), true);
        let y = tape.matmul(a, w);
        assert_eq!(tape.shape(y), &[2, 1, 1]);
        // batch 0: [1,2]·[1,-1] = -1; batch 1: [3,4]·[1,-1] = -1.
        assert_eq!(tape.data(y), &[-1.0, -1.0]);
        let loss = tape.sum(y);
        tape.backward(loss);
        // dW sums both batches: [1+3, 2+4].
        assert_eq!(tape.grad(w).unwrap(), &[4.0, 6.0]);
    }

    #[test]
    fn batched_rhs_per_batch() {
        let mut tape = Tape::<f64>::new(0);
        let a = tape.constant(Tensor::new(&[2, 1, 2], vec![1.0, 0.0, 0.0, 1.0]));
        let b = tape.constant(Tensor::new(&[2, 2, 1], vec![5.0, 6.0, 7.0, 8.0]));
        let y = tape.matmul(a, b);
        assert_eq!(tape.data(y), &[5.0, 8.0]);
    }

    #[test]
    #[should_panic(expected = "inner dims disagree")]
    fn inner_dim_mismatch_panics() {
        let mut tape = Tape::<f64>::new(0);
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[4, 2]));
        tape.matmul(a, b);
    }

    #[test]
    fn gather_rows_forward_and_scatter_backward() {
        let mut tape = Tape::<f64>::new(0);
        let t = tape.leaf(Tensor::new(&[3, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]), true);
        let y = tape.gather_rows(t, &[2, 0, 2]);
        assert_eq!(tape.data(y), &[5.0, 6.0, 1.0, 2.0, 5.0, 6.0]);
        let loss = tape.sum(y);
        tape.backward(loss);
        // Row 2 was gathered twice.
        assert_eq!(tape.grad(t).unwrap(), &[1.0, 1.0, 0.0, 0.0, 2.0, 2.0]);
    }
}
