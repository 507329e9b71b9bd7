//! Pointwise nonlinearities, softmax, and inverted dropout.

use super::{Op, Tape, TensorId};
use crate::scalar::Scalar;

fn sigmoid_val<T: Scalar>(x: T) -> T {
    T::one() / (T::one() + (T::zero() - x).exp())
}

/// GELU, tanh form: 0.5 x (1 + tanh(√(2/π) (x + 0.044715 x³))).
fn gelu_val<T: Scalar>(x: T) -> T {
    let c = T::lit(0.7978845608028654); // sqrt(2/pi)
    let k = T::lit(0.044715);
    let u = c * (x + k * x * x * x);
    T::lit(0.5) * x * (T::one() + u.tanh())
}

/// Overflow-free ln(1 + e^x) = max(x, 0) + ln1p(e^{-|x|}).
fn softplus_val<T: Scalar>(x: T) -> T {
    x.max(T::zero()) + (T::zero() - x.abs()).exp().ln_1p()
}

impl<T: Scalar> Tape<T> {
    fn unary(
        &mut self,
        name: &'static str,
        x: TensorId,
        f: impl Fn(T) -> T,
        op: Op<T>,
    ) -> TensorId {
        let out: Vec<T> = self.node(x).data.iter().map(|&v| f(v)).collect();
        let shape = self.node(x).shape.clone();
        let rg = self.node(x).requires_grad;
        self.push(name, out, shape, rg, op)
    }

    pub fn relu(&mut self, x: TensorId) -> TensorId {
        self.unary("relu", x, |v| v.max(T::zero()), Op::Relu { x })
    }

    pub fn gelu(&mut self, x: TensorId) -> TensorId {
        self.unary("gelu", x, gelu_val, Op::Gelu { x })
    }

    pub fn sigmoid(&mut self, x: TensorId) -> TensorId {
        self.unary("sigmoid", x, sigmoid_val, Op::Sigmoid { x })
    }

    pub fn softplus(&mut self, x: TensorId) -> TensorId {
        self.unary("softplus", x, softplus_val, Op::Softplus { x })
    }

    /// Softmax along one axis, computed with the axis max subtracted so
    /// scores of any magnitude normalize without overflow.
    pub fn softmax(&mut self, x: TensorId, axis: usize) -> TensorId {
        let shape = self.node(x).shape.clone();
        assert!(axis < shape.len(), "softmax axis {axis} out of range for shape {shape:?}");
        let k = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let outer: usize = shape[..axis].iter().product();
        let mut out = vec![T::zero(); self.node(x).data.len()];
        {
            let data = &self.node(x).data;
            for o in 0..outer {
                for i in 0..inner {
                    let base = o * k * inner + i;
                    let mut m = T::neg_infinity();
                    for j in 0..k {
                        m = m.max(data[base + j * inner]);
                    }
                    let mut den = T::zero();
                    for j in 0..k {
                        let e = (data[base + j * inner] - m).exp();
                        out[base + j * inner] = e;
                        den = den + e;
                    }
                    for j in 0..k {
                        out[base + j * inner] = out[base + j * inner] / den;
                    }
                }
            }
        }
        let rg = self.node(x).requires_grad;
        self.push("softmax", out, shape, rg, Op::Softmax { x, axis })
    }

    /// Inverted dropout: in train mode each element is zeroed with
    /// probability `p` and survivors are scaled by 1/(1-p); in eval mode the
    /// input passes through untouched (same id, nothing recorded).
    pub fn dropout(&mut self, x: TensorId, p: f64) -> TensorId {
        assert!((0.0..1.0).contains(&p), "dropout probability must be in [0,1), got {p}");
        if !self.is_train() || p == 0.0 {
            return x;
        }
        let keep = 1.0 - p;
        let n = self.node(x).data.len();
        let mask: Vec<T> = {
            let rng = self.rng_mut();
            (0..n)
                .map(|_| if rng.uniform01() < keep { T::lit(1.0 / keep) } else { T::zero() })
                .collect()
        };
        let out: Vec<T> = self.node(x).data.iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let shape = self.node(x).shape.clone();
        let rg = self.node(x).requires_grad;
        self.push("dropout", out, shape, rg, Op::Dropout { x, mask })
    }
}

pub(crate) fn backward_relu<T: Scalar>(tape: &mut Tape<T>, x: TensorId, g: &[T]) {
    let dx: Vec<T> = tape
        .node(x)
        .data
        .iter()
        .zip(g)
        .map(|(&v, &gi)| if v > T::zero() { gi } else { T::zero() })
        .collect();
    tape.add_grad_owned(x, dx);
}

pub(crate) fn backward_gelu<T: Scalar>(tape: &mut Tape<T>, x: TensorId, g: &[T]) {
    let c = T::lit(0.7978845608028654);
    let k = T::lit(0.044715);
    let half = T::lit(0.5);
    let three_k = T::lit(3.0 * 0.044715);
    let dx: Vec<T> = tape
        .node(x)
        .data
        .iter()
        .zip(g)
        .map(|(&v, &gi)| {
            let u = c * (v + k * v * v * v);
            let t = u.tanh();
            let sech2 = T::one() - t * t;
            let du = c * (T::one() + three_k * v * v);
            gi * (half * (T::one() + t) + half * v * sech2 * du)
        })
        .collect();
    tape.add_grad_owned(x, dx);
}

pub(crate) fn backward_sigmoid<T: Scalar>(tape: &mut Tape<T>, x: TensorId, out: TensorId, g: &[T]) {
    let dx: Vec<T> = tape
        .node(out)
        .data
        .iter()
        .zip(g)
        .map(|(&y, &gi)| gi * y * (T::one() - y))
        .collect();
    tape.add_grad_owned(x, dx);
}

pub(crate) fn backward_softplus<T: Scalar>(tape: &mut Tape<T>, x: TensorId, g: &[T]) {
    let dx: Vec<T> = tape
        .node(x)
        .data
        .iter()
        .zip(g)
        .map(|(&v, &gi)| gi * sigmoid_val(v))
        .collect();
    tape.add_grad_owned(x, dx);
}

pub(crate) fn backward_dropout<T: Scalar>(tape: &mut Tape<T>, x: TensorId, mask: &[T], g: &[T]) {
    let dx: Vec<T> = g.iter().zip(mask).map(|(&gi, &m)| gi * m).collect();
    tape.add_grad_owned(x, dx);
}

/// dx_j = y_j (g_j - Σ_i g_i y_i) along the softmax axis.
pub(crate) fn backward_softmax<T: Scalar>(tape: &mut Tape<T>, x: TensorId, axis: usize, out: TensorId, g: &[T]) {
    if !tape.node(x).requires_grad {
        return;
    }
    let shape = tape.node(out).shape.clone();
    let k = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let outer: usize = shape[..axis].iter().product();
    let y = tape.node(out).data.clone();
    let mut dx = vec![T::zero(); y.len()];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * k * inner + i;
            let mut dot = T::zero();
            for j in 0..k {
                dot = dot + g[base + j * inner] * y[base + j * inner];
            }
            for j in 0..k {
                let at = base + j * inner;
                dx[at] = y[at] * (g[at] - dot);
            }
        }
    }
    tape.add_grad_owned(x, dx);
}
