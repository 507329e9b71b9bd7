//! Bilinear resampling of NCHW maps with half-pixel (align_corners=false)
//! source coordinates: `src = (dst + 0.5) * in/out - 0.5`, clamped at 0.

use super::{Op, Tape, TensorId};
use crate::scalar::Scalar;

/// Precomputed 1-D interpolation taps for one axis.
pub(crate) struct AxisTaps {
    pub lo: Vec<usize>,
    pub hi: Vec<usize>,
    /// Weight of the `hi` tap; `lo` gets `1 - frac`.
    pub frac: Vec<f64>,
}

pub(crate) fn axis_taps(in_n: usize, out_n: usize) -> AxisTaps {
    let scale = in_n as f64 / out_n as f64;
    let mut lo = Vec::with_capacity(out_n);
    let mut hi = Vec::with_capacity(out_n);
    let mut frac = Vec::with_capacity(out_n);
    for o in 0..out_n {
        let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
        let l = (src.floor() as usize).min(in_n - 1);
        let h = (l + 1).min(in_n - 1);
        lo.push(l);
        hi.push(h);
        frac.push(if h > l { src - l as f64 } else { 0.0 });
    }
    AxisTaps { lo, hi, frac }
}

impl<T: Scalar> Tape<T> {
    /// Resize `(B,C,H,W)` to `(B,C,oh,ow)` by bilinear interpolation.
    pub fn bilinear(&mut self, x: TensorId, oh: usize, ow: usize) -> TensorId {
        let shape = self.node(x).shape.clone();
        assert_eq!(shape.len(), 4, "bilinear input must be NCHW, got {shape:?}");
        assert!(oh >= 1 && ow >= 1, "bilinear target extent must be >= 1, got {oh}x{ow}");
        let (b, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
        let ty = axis_taps(h, oh);
        let tx = axis_taps(w, ow);
        let mut out = vec![T::zero(); b * c * oh * ow];
        {
            let data = &self.node(x).data;
            let mut o = 0usize;
            for plane in 0..b * c {
                let base = plane * h * w;
                for oy in 0..oh {
                    let (y0, y1, fy) = (ty.lo[oy], ty.hi[oy], T::lit(ty.frac[oy]));
                    let wy0 = T::one() - fy;
                    for ox in 0..ow {
                        let (x0, x1, fx) = (tx.lo[ox], tx.hi[ox], T::lit(tx.frac[ox]));
                        let wx0 = T::one() - fx;
                        let v = wy0 * (wx0 * data[base + y0 * w + x0] + fx * data[base + y0 * w + x1])
                            + fy * (wx0 * data[base + y1 * w + x0] + fx * data[base + y1 * w + x1]);
                        out[o] = v;
                        o += 1;
                    }
                }
            }
        }
        let rg = self.node(x).requires_grad;
        self.push("bilinear", out, vec![b, c, oh, ow], rg, Op::Bilinear { x })
    }
}

pub(crate) fn backward_bilinear<T: Scalar>(tape: &mut Tape<T>, x: TensorId, out: TensorId, g: &[T]) {
    if !tape.node(x).requires_grad {
        return;
    }
    let in_shape = tape.node(x).shape.clone();
    let out_shape = tape.node(out).shape.clone();
    let (b, c, h, w) = (in_shape[0], in_shape[1], in_shape[2], in_shape[3]);
    let (oh, ow) = (out_shape[2], out_shape[3]);
    let ty = axis_taps(h, oh);
    let tx = axis_taps(w, ow);
    let mut dx = vec![T::zero(); tape.node(x).data.len()];
    let mut o = 0usize;
    for plane in 0..b * c {
        let base = plane * h * w;
        for oy in 0..oh {
            let (y0, y1, fy) = (ty.lo[oy], ty.hi[oy], T::lit(ty.frac[oy]));
            let wy0 = T::one() - fy;
            for ox in 0..ow {
                let (x0, x1, fx) = (tx.lo[ox], tx.hi[ox], T::lit(tx.frac[ox]));
                let wx0 = T::one() - fx;
                let gi = g[o];
                dx[base + y0 * w + x0] = dx[base + y0 * w + x0] + gi * wy0 * wx0;
                dx[base + y0 * w + x1] = dx[base + y0 * w + x1] + gi * wy0 * fx;
                dx[base + y1 * w + x0] = dx[base + y1 * w + x0] + gi * fy * wx0;
                dx[base + y1 * w + x1] = dx[base + y1 * w + x1] + gi * fy * fx;
                o += 1;
            }
        }
    }
    tape.add_grad_owned(x, dx);
}
