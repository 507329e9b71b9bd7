//! Binary elementwise ops with general broadcasting: trailing axes are
//! aligned and size-1 axes stretch, so `(B,C,H,W) ⊙ (B,C,1,1)` and
//! `(N,D) + (D,)` both work. Backward reduces gradients back over the
//! stretched axes by summation.

use super::{Op, Tape, TensorId};
use crate::scalar::Scalar;

/// Precomputed index mapping for one broadcasted binary op.
pub(crate) struct Broadcast {
    pub(crate) out_shape: Vec<usize>,
    /// Per output axis: element stride into each input, 0 on stretched axes.
    a_strides: Vec<usize>,
    b_strides: Vec<usize>,
    /// Fast path: both inputs already have the output shape.
    same_shape: bool,
}

impl Broadcast {
    pub(crate) fn resolve(a: &[usize], b: &[usize], op: &'static str) -> Broadcast {
        let rank = a.len().max(b.len());
        let mut out_shape = vec![0usize; rank];
        let axis_of = |shape: &[usize], d: usize| -> usize {
            // Align trailing axes; missing leading axes act as extent 1.
            let offset = rank - shape.len();
            if d < offset { 1 } else { shape[d - offset] }
        };
        for d in 0..rank {
            let (ea, eb) = (axis_of(a, d), axis_of(b, d));
            assert!(
                ea == eb || ea == 1 || eb == 1,
                "{op}: shapes {a:?} and {b:?} are not broadcast-compatible (axis {d}: {ea} vs {eb})"
            );
            out_shape[d] = ea.max(eb);
        }
        let strides_for = |shape: &[usize]| -> Vec<usize> {
            let own = crate::tensor::strides_of(shape);
            let offset = rank - shape.len();
            (0..rank)
                .map(|d| {
                    if d < offset || shape[d - offset] == 1 { 0 } else { own[d - offset] }
                })
                .collect()
        };
        let same_shape = a == out_shape.as_slice() && b == out_shape.as_slice();
        Broadcast { a_strides: strides_for(a), b_strides: strides_for(b), out_shape, same_shape }
    }

    pub(crate) fn numel(&self) -> usize {
        self.out_shape.iter().product()
    }

    /// Visit every output element with the flat offsets of both inputs.
    /// Odometer-style iteration keeps this allocation-free per element.
    pub(crate) fn for_each(&self, mut f: impl FnMut(usize, usize, usize)) {
        let n = self.numel();
        if n == 0 {
            return;
        }
        if self.same_shape {
            for i in 0..n {
                f(i, i, i);
            }
            return;
        }
        let rank = self.out_shape.len();
        let mut coords = vec![0usize; rank];
        let (mut oa, mut ob) = (0usize, 0usize);
        for i in 0..n {
            f(i, oa, ob);
            for d in (0..rank).rev() {
                coords[d] += 1;
                oa += self.a_strides[d];
                ob += self.b_strides[d];
                if coords[d] < self.out_shape[d] {
                    break;
                }
                coords[d] = 0;
                oa -= self.a_strides[d] * self.out_shape[d];
                ob -= self.b_strides[d] * self.out_shape[d];
            }
        }
    }
}

impl<T: Scalar> Tape<T> {
    fn binary(
        &mut self,
        name: &'static str,
        a: TensorId,
        b: TensorId,
        f: impl Fn(T, T) -> T,
        make_op: impl Fn(Broadcast) -> Op<T>,
    ) -> TensorId {
        let bc = Broadcast::resolve(&self.node(a).shape, &self.node(b).shape, name);
        let mut out = vec![T::zero(); bc.numel()];
        {
            let (da, db) = (&self.node(a).data, &self.node(b).data);
            bc.for_each(|o, ia, ib| out[o] = f(da[ia], db[ib]));
        }
        let shape = bc.out_shape.clone();
        let rg = self.any_requires_grad(&[a, b]);
        self.push(name, out, shape, rg, make_op(bc))
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> TensorId {
        self.binary("add", a, b, |x, y| x + y, |bc| Op::Add { a, b, bc })
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> TensorId {
        self.binary("sub", a, b, |x, y| x - y, |bc| Op::Sub { a, b, bc })
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> TensorId {
        self.binary("mul", a, b, |x, y| x * y, |bc| Op::Mul { a, b, bc })
    }

    pub fn div(&mut self, a: TensorId, b: TensorId) -> TensorId {
        self.binary("div", a, b, |x, y| x / y, |bc| Op::Div { a, b, bc })
    }

    pub fn add_scalar(&mut self, a: TensorId, c: f64) -> TensorId {
        let c = T::lit(c);
        let out: Vec<T> = self.node(a).data.iter().map(|&x| x + c).collect();
        let shape = self.node(a).shape.clone();
        let rg = self.node(a).requires_grad;
        self.push("add_scalar", out, shape, rg, Op::AddScalar { a })
    }

    pub fn mul_scalar(&mut self, a: TensorId, c: f64) -> TensorId {
        let c = T::lit(c);
        let out: Vec<T> = self.node(a).data.iter().map(|&x| x * c).collect();
        let shape = self.node(a).shape.clone();
        let rg = self.node(a).requires_grad;
        self.push("mul_scalar", out, shape, rg, Op::MulScalar { a, c })
    }
}

pub(crate) fn backward_add<T: Scalar>(tape: &mut Tape<T>, a: TensorId, b: TensorId, bc: &Broadcast, g: &[T]) {
    accumulate(tape, a, bc, Side::A, |o, _, _| g[o]);
    accumulate(tape, b, bc, Side::B, |o, _, _| g[o]);
}

pub(crate) fn backward_sub<T: Scalar>(tape: &mut Tape<T>, a: TensorId, b: TensorId, bc: &Broadcast, g: &[T]) {
    accumulate(tape, a, bc, Side::A, |o, _, _| g[o]);
    accumulate(tape, b, bc, Side::B, |o, _, _| T::zero() - g[o]);
}

pub(crate) fn backward_mul<T: Scalar>(tape: &mut Tape<T>, a: TensorId, b: TensorId, bc: &Broadcast, g: &[T]) {
    {
        let bdata = tape.node(b).data.clone();
        accumulate(tape, a, bc, Side::A, |o, _, ib| g[o] * bdata[ib]);
    }
    {
        let adata = tape.node(a).data.clone();
        accumulate(tape, b, bc, Side::B, |o, ia, _| g[o] * adata[ia]);
    }
}

pub(crate) fn backward_div<T: Scalar>(tape: &mut Tape<T>, a: TensorId, b: TensorId, bc: &Broadcast, g: &[T]) {
    {
        let bdata = tape.node(b).data.clone();
        accumulate(tape, a, bc, Side::A, |o, _, ib| g[o] / bdata[ib]);
    }
    {
        let adata = tape.node(a).data.clone();
        let bdata = tape.node(b).data.clone();
        accumulate(tape, b, bc, Side::B, |o, ia, ib| {
            T::zero() - g[o] * adata[ia] / (bdata[ib] * bdata[ib])
        });
    }
}

enum Side {
    A,
    B,
}

fn accumulate<T: Scalar>(
    tape: &mut Tape<T>,
    id: TensorId,
    bc: &Broadcast,
    side: Side,
    contrib: impl Fn(usize, usize, usize) -> T,
) {
    if !tape.node(id).requires_grad {
        return;
    }
    let mut acc = vec![T::zero(); tape.node(id).data.len()];
    bc.for_each(|o, ia, ib| {
        let slot = match side {
            Side::A => ia,
            Side::B => ib,
        };
        acc[slot] = acc[slot] + contrib(o, ia, ib);
    });
    tape.add_grad_owned(id, acc);
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn mul_matches_hand_values() {
        let mut tape = Tape::<f64>::new(0);
        let a = tape.constant(Tensor::new(&[2], vec![1.0, 2.0]));
        let b = tape.constant(Tensor::new(&[2], vec![3.0, 4.0]));
        let c = tape.mul(a, b);
        assert_eq!(tape.data(c), &[3.0, 8.0]);
    }

    #[test]
    fn add_with_zero_is_identity() {
        let mut tape = Tape::<f64>::new(0);
        let a = tape.constant(Tensor::new(&[3], vec![0.25, -7.0, 1e4]));
        let z = tape.constant(Tensor::zeros(&[3]));
        let c = tape.add(a, z);
        assert_eq!(tape.data(c), tape.data(a));
    }

    #[test]
    fn channel_vector_broadcast_and_backward_reduction() {
        // (1,2,2,2) + (2,1,1): bias per channel, then check grads reduce.
        let mut tape = Tape::<f64>::new(0);
        let x = tape.leaf(Tensor::from_fn(&[1, 2, 2, 2], |i| i as f64), true);
        let bias = tape.leaf(Tensor::new(&[2, 1, 1], vec![10.0, 100.0]), true);
        let y = tape.add(x, bias);
        assert_eq!(tape.shape(y), &[1, 2, 2, 2]);
        assert_eq!(tape.data(y), &[10.0, 11.0, 12.0, 13.0, 104.0, 105.0, 106.0, 107.0]);
        let loss = tape.sum(y);
        tape.backward(loss);
        assert_eq!(tape.grad(x).unwrap(), &[1.0; 8][..]);
        // Each bias element feeds 4 output elements.
        assert_eq!(tape.grad(bias).unwrap(), &[4.0, 4.0]);
    }

    #[test]
    fn div_backward_matches_closed_form() {
        let mut tape = Tape::<f64>::new(0);
        let a = tape.leaf(Tensor::new(&[2], vec![1.0, 9.0]), true);
        let b = tape.leaf(Tensor::new(&[2], vec![2.0, 3.0]), true);
        let q = tape.div(a, b);
        let loss = tape.sum(q);
        tape.backward(loss);
        assert_eq!(tape.grad(a).unwrap(), &[0.5, 1.0 / 3.0]);
        assert_eq!(tape.grad(b).unwrap(), &[-0.25, -1.0]);
    }

    #[test]
    #[should_panic(expected = "not broadcast-compatible")]
    fn incompatible_shapes_panic_with_both_shapes() {
        let mut tape = Tape::<f64>::new(0);
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 4]));
        tape.add(a, b);
    }

    #[test]
    fn scalar_ops() {
        let mut tape = Tape::<f64>::new(0);
        let a = tape.leaf(Tensor::new(&[2], vec![1.5, -2.0]), true);
        let b = tape.add_scalar(a, 1.0);
        let c = tape.mul_scalar(b, 3.0);
        assert_eq!(tape.data(c), &[7.5, -3.0]);
        let loss = tape.sum(c);
        tape.backward(loss);
        assert_eq!(tape.grad(a).unwrap(), &[3.0, 3.0]);
    }
}
