//! Exponentially weighted pooling and max reduction.
//!
//! Soft pooling averages each region with weights `e^a / Σ e^a`, so large
//! activations dominate without the hard cutoff of max pooling:
//! `p = Σ e^{a_t} a_t / Σ e^{a_s}`. Computed with the region max subtracted
//! so huge activations cannot overflow the exponentials.

use super::{Op, Tape, TensorId};
use crate::scalar::Scalar;

fn softpool_region<T: Scalar>(vals: impl Iterator<Item = T> + Clone) -> T {
    let m = vals.clone().fold(T::neg_infinity(), |acc, v| acc.max(v));
    let mut num = T::zero();
    let mut den = T::zero();
    for v in vals {
        let e = (v - m).exp();
        num = num + e * v;
        den = den + e;
    }
    num / den
}

impl<T: Scalar> Tape<T> {
    /// Non-overlapping soft pooling of `(B,C,H,W)` with a `kh x kw` window;
    /// `kh == H, kw == W` gives the global descriptor `(B,C,1,1)`. Extents
    /// must divide exactly.
    pub fn softpool2d(&mut self, x: TensorId, kh: usize, kw: usize) -> TensorId {
        let shape = self.node(x).shape.clone();
        assert_eq!(shape.len(), 4, "softpool2d input must be NCHW, got {shape:?}");
        let (b, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
        assert!(kh >= 1 && kw >= 1, "softpool2d window must be >= 1");
        assert!(
            h % kh == 0 && w % kw == 0,
            "softpool2d input {h}x{w} not divisible by window {kh}x{kw}"
        );
        let (oh, ow) = (h / kh, w / kw);
        let mut out = vec![T::zero(); b * c * oh * ow];
        {
            let data = &self.node(x).data;
            let mut o = 0usize;
            for plane in 0..b * c {
                let base = plane * h * w;
                for oy in 0..oh {
                    for ox in 0..ow {
                        let vals = RegionIter { data, base, w, y0: oy * kh, x0: ox * kw, kh, kw, i: 0 };
                        out[o] = softpool_region(vals);
                        o += 1;
                    }
                }
            }
        }
        let rg = self.node(x).requires_grad;
        self.push("softpool2d", out, vec![b, c, oh, ow], rg, Op::SoftPool2d { x, kh, kw })
    }

    /// Max over the last axis with saved argmax; `(.., k)` reduces to `(..)`
    /// (a rank-1 input reduces to shape `(1,)`).
    pub fn max_last(&mut self, x: TensorId) -> TensorId {
        let shape = self.node(x).shape.clone();
        let k = *shape.last().expect("max_last needs rank >= 1");
        assert!(k > 0, "max_last over an empty axis");
        let rows = self.node(x).data.len() / k;
        let mut out = vec![T::zero(); rows];
        let mut argmax = vec![0usize; rows];
        {
            let data = &self.node(x).data;
            for r in 0..rows {
                let row = &data[r * k..(r + 1) * k];
                let (mut bi, mut bv) = (0usize, row[0]);
                for (i, &v) in row.iter().enumerate().skip(1) {
                    if v > bv {
                        bv = v;
                        bi = i;
                    }
                }
                out[r] = bv;
                argmax[r] = bi;
            }
        }
        let out_shape = if shape.len() == 1 { vec![1] } else { shape[..shape.len() - 1].to_vec() };
        let rg = self.node(x).requires_grad;
        self.push("max_last", out, out_shape, rg, Op::MaxLast { x, argmax })
    }
}

#[derive(Clone)]
struct RegionIter<'a, T> {
    data: &'a [T],
    base: usize,
    w: usize,
    y0: usize,
    x0: usize,
    kh: usize,
    kw: usize,
    i: usize,
}

impl<T: Copy> Iterator for RegionIter<'_, T> {
    type Item = T;
    fn next(&mut self) -> Option<T> {
        if self.i >= self.kh * self.kw {
            return None;
        }
        let (dy, dx) = (self.i / self.kw, self.i % self.kw);
        self.i += 1;
        Some(self.data[self.base + (self.y0 + dy) * self.w + self.x0 + dx])
    }
}

/// d p / d a_t = e^{a_t - m} (1 + a_t - p) / Σ e^{a_s - m}.
pub(crate) fn backward_softpool2d<T: Scalar>(tape: &mut Tape<T>, x: TensorId, kh: usize, kw: usize, g: &[T]) {
    if !tape.node(x).requires_grad {
        return;
    }
    let shape = tape.node(x).shape.clone();
    let (b, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    let (oh, ow) = (h / kh, w / kw);
    let data = tape.node(x).data.clone();
    let mut dx = vec![T::zero(); data.len()];
    let mut o = 0usize;
    for plane in 0..b * c {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut m = T::neg_infinity();
                for dy in 0..kh {
                    for dxi in 0..kw {
                        m = m.max(data[base + (oy * kh + dy) * w + ox * kw + dxi]);
                    }
                }
                let mut num = T::zero();
                let mut den = T::zero();
                for dy in 0..kh {
                    for dxi in 0..kw {
                        let v = data[base + (oy * kh + dy) * w + ox * kw + dxi];
                        let e = (v - m).exp();
                        num = num + e * v;
                        den = den + e;
                    }
                }
                let p = num / den;
                let go = g[o];
                for dy in 0..kh {
                    for dxi in 0..kw {
                        let at = base + (oy * kh + dy) * w + ox * kw + dxi;
                        let v = data[at];
                        let e = (v - m).exp();
                        dx[at] = dx[at] + go * e * (T::one() + v - p) / den;
                    }
                }
                o += 1;
            }
        }
    }
    tape.add_grad_owned(x, dx);
}

pub(crate) fn backward_max_last<T: Scalar>(tape: &mut Tape<T>, x: TensorId, argmax: &[usize], g: &[T]) {
    if !tape.node(x).requires_grad {
        return;
    }
    let k = *tape.node(x).shape.last().unwrap();
    let mut dx = vec![T::zero(); tape.node(x).data.len()];
    for (r, (&am, &gi)) in argmax.iter().zip(g).enumerate() {
        dx[r * k + am] = dx[r * k + am] + gi;
    }
    tape.add_grad_owned(x, dx);
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn equal_activations_reduce_to_plain_mean() {
        let mut tape = Tape::<f64>::new(0);
        let x = tape.constant(Tensor::full(&[1, 1, 4, 4], 2.5));
        let y = tape.softpool2d(x, 2, 2);
        for &v in tape.data(y) {
            assert!((v - 2.5).abs() < 1e-12);
        }
    }

    #[test]
    fn frozen_two_value_region() {
        // Region {ln 2, 0}: weights e^{ln2}=2 and e^0=1, so
        // p = (2·ln2 + 1·0) / 3 = 2 ln 2 / 3.
        let mut tape = Tape::<f64>::new(0);
        let x = tape.constant(Tensor::new(&[1, 1, 1, 2], vec![2f64.ln(), 0.0]));
        let y = tape.softpool2d(x, 1, 2);
        let expected = 0.46209812037329684;
        assert!((tape.data(y)[0] - expected).abs() < 1e-15);
    }

    #[test]
    fn all_zero_region_pools_to_zero() {
        let mut tape = Tape::<f64>::new(0);
        let x = tape.constant(Tensor::zeros(&[1, 2, 2, 2]));
        let y = tape.softpool2d(x, 2, 2);
        assert_eq!(tape.data(y), &[0.0, 0.0]);
    }

    #[test]
    fn output_stays_within_region_bounds_and_biases_high() {
        let mut tape = Tape::<f64>::new(0);
        let x = tape.constant(Tensor::new(&[1, 1, 2, 2], vec![-1.0, 0.5, 3.0, 0.25]));
        let y = tape.softpool2d(x, 2, 2);
        let v = tape.data(y)[0];
        assert!(v > -1.0 && v < 3.0);
        // Exponential weighting pulls the result above the plain mean.
        assert!(v > (-1.0 + 0.5 + 3.0 + 0.25) / 4.0);
    }

    #[test]
    fn huge_activations_stay_finite() {
        let mut tape = Tape::<f64>::new(0);
        let x = tape.constant(Tensor::new(&[1, 1, 1, 2], vec![1000.0, 999.0]));
        let y = tape.softpool2d(x, 1, 2);
        assert!(tape.first_nonfinite().is_none());
        let v = tape.data(y)[0];
        assert!(v > 999.0 && v <= 1000.0);
    }

    #[test]
    fn global_window_gives_one_by_one() {
        let mut tape = Tape::<f64>::new(0);
        let x = tape.constant(Tensor::from_fn(&[2, 3, 4, 4], |i| (i as f64).sin()));
        let y = tape.softpool2d(x, 4, 4);
        assert_eq!(tape.shape(y), &[2, 3, 1, 1]);
    }

    #[test]
    #[should_panic(expected = "not divisible")]
    fn indivisible_extent_panics() {
        let mut tape = Tape::<f64>::new(0);
        let x = tape.constant(Tensor::zeros(&[1, 1, 5, 4]));
        tape.softpool2d(x, 2, 2);
    }

    #[test]
    fn max_last_routes_grad_to_argmax_only() {
        let mut tape = Tape::<f64>::new(0);
        let x = tape.leaf(Tensor::new(&[2, 3], vec![1.0, 5.0, 2.0, -3.0, -1.0, -2.0]), true);
        let y = tape.max_last(x);
        assert_eq!(tape.data(y), &[5.0, -1.0]);
        let loss = tape.sum(y);
        tape.backward(loss);
        assert_eq!(tape.grad(x).unwrap(), &[0.0, 1.0, 0.0, 0.0, 1.0, 0.0]);
    }
}
