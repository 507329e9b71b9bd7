//! Data-movement ops (reshape, permute, roll, concat) and sum reductions.
//! All are exact rearrangements or additions, so their backward rules are
//! the inverse movement (or broadcast) of the upstream gradient.

use super::{Op, Tape, TensorId};
use crate::scalar::Scalar;
use crate::tensor::strides_of;

impl<T: Scalar> Tape<T> {
    /// Same elements, new shape (row-major order preserved).
    pub fn reshape(&mut self, x: TensorId, shape: &[usize]) -> TensorId {
        let numel: usize = shape.iter().product();
        assert_eq!(
            numel,
            self.node(x).data.len(),
            "reshape {:?} -> {:?} changes element count",
            self.node(x).shape,
            shape
        );
        let data = self.node(x).data.clone();
        let rg = self.node(x).requires_grad;
        self.push("reshape", data, shape.to_vec(), rg, Op::Reshape { x })
    }

    /// Reorder axes; `axes` is a permutation of `0..rank` giving, for each
    /// output axis, the source axis.
    pub fn permute(&mut self, x: TensorId, axes: &[usize]) -> TensorId {
        let shape = self.node(x).shape.clone();
        assert_eq!(axes.len(), shape.len(), "permute axes {axes:?} must cover rank {}", shape.len());
        let mut seen = vec![false; axes.len()];
        for &a in axes {
            assert!(a < axes.len() && !seen[a], "permute axes {axes:?} is not a permutation");
            seen[a] = true;
        }
        let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
        let in_strides = strides_of(&shape);
        let src_strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
        let mut out = vec![T::zero(); self.node(x).data.len()];
        {
            let data = &self.node(x).data;
            for_each_offset(&out_shape, &src_strides, |o, src| out[o] = data[src]);
        }
        let rg = self.node(x).requires_grad;
        self.push("permute", out, out_shape, rg, Op::Permute { x, axes: axes.to_vec() })
    }

    /// Cyclic shift along every axis: `out[i] = x[(i - shift) mod extent]`.
    /// Positive shifts move content toward higher indices.
    pub fn roll(&mut self, x: TensorId, shifts: &[isize]) -> TensorId {
        let shape = self.node(x).shape.clone();
        assert_eq!(shifts.len(), shape.len(), "roll shifts {shifts:?} must cover rank {}", shape.len());
        let out = roll_data(&self.node(x).data, &shape, shifts);
        let rg = self.node(x).requires_grad;
        self.push("roll", out, shape, rg, Op::Roll { x, shifts: shifts.to_vec() })
    }

    /// Concatenate along one axis; all other extents must agree.
    pub fn concat(&mut self, parts: &[TensorId], axis: usize) -> TensorId {
        assert!(!parts.is_empty(), "concat of zero tensors");
        let first = self.node(parts[0]).shape.clone();
        assert!(axis < first.len(), "concat axis {axis} out of range for shape {first:?}");
        let mut axis_total = 0usize;
        for &p in parts {
            let s = &self.node(p).shape;
            assert_eq!(s.len(), first.len(), "concat rank mismatch: {first:?} vs {s:?}");
            for d in 0..first.len() {
                if d != axis {
                    assert_eq!(s[d], first[d], "concat off-axis extent mismatch on axis {d}: {first:?} vs {s:?}");
                }
            }
            axis_total += s[axis];
        }
        let mut out_shape = first.clone();
        out_shape[axis] = axis_total;
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut out = vec![T::zero(); outer * axis_total * inner];
        {
            let mut axis_off = 0usize;
            for &p in parts {
                let pk = self.node(p).shape[axis];
                let data = &self.node(p).data;
                for o in 0..outer {
                    let src = &data[o * pk * inner..(o + 1) * pk * inner];
                    let dst_base = (o * axis_total + axis_off) * inner;
                    out[dst_base..dst_base + pk * inner].copy_from_slice(src);
                }
                axis_off += pk;
            }
        }
        let rg = self.any_requires_grad(parts);
        self.push("concat", out, out_shape, rg, Op::Concat { parts: parts.to_vec(), axis })
    }

    /// Total over all elements, as a shape-`(1,)` scalar.
    pub fn sum(&mut self, x: TensorId) -> TensorId {
        let total: T = self.node(x).data.iter().copied().sum();
        let rg = self.node(x).requires_grad;
        self.push("sum", vec![total], vec![1], rg, Op::Sum { x })
    }

    /// Sum over the last axis: `(.., k)` to `(..)` (rank-1 input gives `(1,)`).
    pub fn sum_last(&mut self, x: TensorId) -> TensorId {
        let shape = self.node(x).shape.clone();
        let k = *shape.last().expect("sum_last needs rank >= 1");
        let rows = self.node(x).data.len() / k;
        let mut out = vec![T::zero(); rows];
        {
            let data = &self.node(x).data;
            for r in 0..rows {
                out[r] = data[r * k..(r + 1) * k].iter().copied().sum();
            }
        }
        let out_shape = if shape.len() == 1 { vec![1] } else { shape[..shape.len() - 1].to_vec() };
        let rg = self.node(x).requires_grad;
        self.push("sum_last", out, out_shape, rg, Op::SumLast { x })
    }

    /// Mean over all elements, as a shape-`(1,)` scalar.
    pub fn mean(&mut self, x: TensorId) -> TensorId {
        let n = self.node(x).data.len();
        let s = self.sum(x);
        self.mul_scalar(s, 1.0 / n as f64)
    }
}

/// Visit output offsets in row-major order along with the source offset
/// implied by per-axis source strides.
fn for_each_offset(out_shape: &[usize], src_strides: &[usize], mut f: impl FnMut(usize, usize)) {
    let n: usize = out_shape.iter().product();
    if n == 0 {
        return;
    }
    let rank = out_shape.len();
    if rank == 0 {
        f(0, 0);
        return;
    }
    let mut coords = vec![0usize; rank];
    let mut src = 0usize;
    for o in 0..n {
        f(o, src);
        for d in (0..rank).rev() {
            coords[d] += 1;
            src += src_strides[d];
            if coords[d] < out_shape[d] {
                break;
            }
            coords[d] = 0;
            src -= src_strides[d] * out_shape[d];
        }
    }
}

fn roll_data<T: Copy>(data: &[T], shape: &[usize], shifts: &[isize]) -> Vec<T> {
    let n = data.len();
    let mut out = vec![data[0]; n];
    let strides = strides_of(shape);
    let rank = shape.len();
    let norm: Vec<usize> = shifts
        .iter()
        .zip(shape)
        .map(|(&s, &e)| {
            let e = e as isize;
            (((s % e) + e) % e) as usize
        })
        .collect();
    let mut coords = vec![0usize; rank];
    for o in 0..n {
        // Source index: (coord - shift) mod extent per axis.
        let mut src = 0usize;
        for d in 0..rank {
            let c = (coords[d] + shape[d] - norm[d]) % shape[d];
            src += c * strides[d];
        }
        out[o] = data[src];
        for d in (0..rank).rev() {
            coords[d] += 1;
            if coords[d] < shape[d] {
                break;
            }
            coords[d] = 0;
        }
    }
    out
}

pub(crate) fn backward_permute<T: Scalar>(tape: &mut Tape<T>, x: TensorId, axes: &[usize], g: &[T]) {
    if !tape.node(x).requires_grad {
        return;
    }
    // Inverse permutation: axis axes[d] of the input came from output axis d.
    let mut inv = vec![0usize; axes.len()];
    for (d, &a) in axes.iter().enumerate() {
        inv[a] = d;
    }
    let in_shape = tape.node(x).shape.clone();
    let out_shape: Vec<usize> = axes.iter().map(|&a| in_shape[a]).collect();
    let g_strides = strides_of(&out_shape);
    let src_strides: Vec<usize> = inv.iter().map(|&d| g_strides[d]).collect();
    let mut dx = vec![T::zero(); tape.node(x).data.len()];
    for_each_offset(&in_shape, &src_strides, |o, src| dx[o] = g[src]);
    tape.add_grad_owned(x, dx);
}

pub(crate) fn backward_roll<T: Scalar>(tape: &mut Tape<T>, x: TensorId, shifts: &[isize], g: &[T]) {
    if !tape.node(x).requires_grad {
        return;
    }
    let shape = tape.node(x).shape.clone();
    let inverse: Vec<isize> = shifts.iter().map(|&s| -s).collect();
    let dx = roll_data(g, &shape, &inverse);
    tape.add_grad_owned(x, dx);
}

pub(crate) fn backward_concat<T: Scalar>(tape: &mut Tape<T>, parts: &[TensorId], axis: usize, out: TensorId, g: &[T]) {
    let out_shape = tape.node(out).shape.clone();
    let outer: usize = out_shape[..axis].iter().product();
    let inner: usize = out_shape[axis + 1..].iter().product();
    let axis_total = out_shape[axis];
    let mut axis_off = 0usize;
    for &p in parts.iter() {
        let pk = tape.node(p).shape[axis];
        if tape.node(p).requires_grad {
            let mut dp = vec![T::zero(); tape.node(p).data.len()];
            for o in 0..outer {
                let src_base = (o * axis_total + axis_off) * inner;
                dp[o * pk * inner..(o + 1) * pk * inner].copy_from_slice(&g[src_base..src_base + pk * inner]);
            }
            tape.add_grad_owned(p, dp);
        }
        axis_off += pk;
    }
}
