//! 2-D convolution over NCHW tensors via im2col + matmul. Columns are cheap
//! to rebuild, so backward recomputes them instead of caching per-sample
//! buffers on the tape.

use super::{Op, Tape, TensorId};
use crate::scalar::Scalar;
use crate::tensor::{matmul_accum, matmul_nt_accum, matmul_tn_accum};

pub(crate) struct ConvDims {
    pub batch: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub oh: usize,
    pub ow: usize,
}

pub(crate) fn resolve_conv(
    x_shape: &[usize],
    w_shape: &[usize],
    stride: usize,
    dilation: usize,
    pad: usize,
) -> ConvDims {
    assert_eq!(x_shape.len(), 4, "conv2d input must be NCHW, got {x_shape:?}");
    assert_eq!(w_shape.len(), 4, "conv2d kernel must be (out,in,kh,kw), got {w_shape:?}");
    assert!(stride >= 1 && dilation >= 1, "conv2d stride/dilation must be >= 1");
    let (batch, cin, h, w) = (x_shape[0], x_shape[1], x_shape[2], x_shape[3]);
    let (cout, wcin, kh, kw) = (w_shape[0], w_shape[1], w_shape[2], w_shape[3]);
    assert_eq!(cin, wcin, "conv2d channel mismatch: input {x_shape:?} vs kernel {w_shape:?}");
    // Effective kernel extent with dilation: d*(k-1)+1.
    let eff_h = dilation * (kh - 1) + 1;
    let eff_w = dilation * (kw - 1) + 1;
    assert!(
        h + 2 * pad >= eff_h && w + 2 * pad >= eff_w,
        "conv2d output extent would be non-positive: input {h}x{w}, pad {pad}, effective kernel {eff_h}x{eff_w}"
    );
    let oh = (h + 2 * pad - eff_h) / stride + 1;
    let ow = (w + 2 * pad - eff_w) / stride + 1;
    ConvDims { batch, cin, h, w, cout, kh, kw, oh, ow }
}

/// Unfold one sample into a `(cin*kh*kw, oh*ow)` column matrix.
fn im2col<T: Scalar>(
    x: &[T],
    d: &ConvDims,
    stride: usize,
    dilation: usize,
    pad: usize,
    col: &mut [T],
) {
    let (h, w) = (d.h as isize, d.w as isize);
    let mut row = 0usize;
    for c in 0..d.cin {
        let plane = &x[c * d.h * d.w..(c + 1) * d.h * d.w];
        for ky in 0..d.kh {
            for kx in 0..d.kw {
                let out_row = &mut col[row * d.oh * d.ow..(row + 1) * d.oh * d.ow];
                let mut o = 0usize;
                for oy in 0..d.oh {
                    let iy = (oy * stride + ky * dilation) as isize - pad as isize;
                    for ox in 0..d.ow {
                        let ix = (ox * stride + kx * dilation) as isize - pad as isize;
                        out_row[o] = if iy >= 0 && iy < h && ix >= 0 && ix < w {
                            plane[iy as usize * d.w + ix as usize]
                        } else {
                            T::zero()
                        };
                        o += 1;
                    }
                }
                row += 1;
            }
        }
    }
}

/// Fold a column-matrix gradient back onto the input plane (scatter-add).
fn col2im_add<T: Scalar>(
    dcol: &[T],
    d: &ConvDims,
    stride: usize,
    dilation: usize,
    pad: usize,
    dx: &mut [T],
) {
    let (h, w) = (d.h as isize, d.w as isize);
    let mut row = 0usize;
    for c in 0..d.cin {
        let base = c * d.h * d.w;
        for ky in 0..d.kh {
            for kx in 0..d.kw {
                let in_row = &dcol[row * d.oh * d.ow..(row + 1) * d.oh * d.ow];
                let mut o = 0usize;
                for oy in 0..d.oh {
                    let iy = (oy * stride + ky * dilation) as isize - pad as isize;
                    for ox in 0..d.ow {
                        let ix = (ox * stride + kx * dilation) as isize - pad as isize;
                        if iy >= 0 && iy < h && ix >= 0 && ix < w {
                            let at = base + iy as usize * d.w + ix as usize;
                            dx[at] = dx[at] + in_row[o];
                        }
                        o += 1;
                    }
                }
                row += 1;
            }
        }
    }
}

impl<T: Scalar> Tape<T> {
    /// Cross-correlation of `x: (B,Cin,H,W)` with `w: (Cout,Cin,kh,kw)` plus
    /// optional per-channel `bias: (Cout,)`. Zero padding; square stride and
    /// dilation. Output `(B,Cout,OH,OW)` with `OH = (H+2p-d(kh-1)-1)/s + 1`.
    pub fn conv2d(
        &mut self,
        x: TensorId,
        w: TensorId,
        bias: Option<TensorId>,
        stride: usize,
        dilation: usize,
        pad: usize,
    ) -> TensorId {
        let d = resolve_conv(&self.node(x).shape, &self.node(w).shape, stride, dilation, pad);
        if let Some(b) = bias {
            assert_eq!(self.node(b).shape, &[d.cout], "conv2d bias must be (Cout,)");
        }
        let krows = d.cin * d.kh * d.kw;
        let spatial = d.oh * d.ow;
        let mut out = vec![T::zero(); d.batch * d.cout * spatial];
        {
            let xdata = &self.node(x).data;
            let wdata = &self.node(w).data;
            let mut col = vec![T::zero(); krows * spatial];
            for s in 0..d.batch {
                im2col(&xdata[s * d.cin * d.h * d.w..(s + 1) * d.cin * d.h * d.w], &d, stride, dilation, pad, &mut col);
                matmul_accum(wdata, &col, d.cout, krows, spatial, &mut out[s * d.cout * spatial..(s + 1) * d.cout * spatial]);
            }
            if let Some(b) = bias {
                let bdata = &self.node(b).data;
                for s in 0..d.batch {
                    for c in 0..d.cout {
                        let bc = bdata[c];
                        for v in &mut out[(s * d.cout + c) * spatial..(s * d.cout + c + 1) * spatial] {
                            *v = *v + bc;
                        }
                    }
                }
            }
        }
        let mut inputs = vec![x, w];
        inputs.extend(bias);
        let rg = self.any_requires_grad(&inputs);
        self.push(
            "conv2d",
            out,
            vec![d.batch, d.cout, d.oh, d.ow],
            rg,
            Op::Conv2d { x, w, bias, stride, dilation, pad },
        )
    }
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn backward_conv2d<T: Scalar>(
    tape: &mut Tape<T>,
    x: TensorId,
    w: TensorId,
    bias: Option<TensorId>,
    stride: usize,
    dilation: usize,
    pad: usize,
    out_id: TensorId,
    g: &[T],
) {
    let d = resolve_conv(&tape.node(x).shape, &tape.node(w).shape, stride, dilation, pad);
    let _ = out_id;
    let krows = d.cin * d.kh * d.kw;
    let spatial = d.oh * d.ow;
    let need_dx = tape.node(x).requires_grad;
    let need_dw = tape.node(w).requires_grad;
    let xdata = tape.node(x).data.clone();
    let wdata = tape.node(w).data.clone();
    let mut dx = if need_dx { vec![T::zero(); xdata.len()] } else { Vec::new() };
    let mut dw = if need_dw { vec![T::zero(); wdata.len()] } else { Vec::new() };
    let mut col = vec![T::zero(); krows * spatial];
    let mut dcol = vec![T::zero(); krows * spatial];
    for s in 0..d.batch {
        let g_s = &g[s * d.cout * spatial..(s + 1) * d.cout * spatial];
        if need_dw {
            im2col(&xdata[s * d.cin * d.h * d.w..(s + 1) * d.cin * d.h * d.w], &d, stride, dilation, pad, &mut col);
            // dW += G_s @ col^T
            matmul_nt_accum(g_s, &col, d.cout, spatial, krows, &mut dw);
        }
        if need_dx {
            // dcol = W^T @ G_s
            dcol.iter_mut().for_each(|v| *v = T::zero());
            matmul_tn_accum(&wdata, g_s, krows, d.cout, spatial, &mut dcol);
            col2im_add(&dcol, &d, stride, dilation, pad, &mut dx[s * d.cin * d.h * d.w..(s + 1) * d.cin * d.h * d.w]);
        }
    }
    if need_dx {
        tape.add_grad_owned(x, dx);
    }
    if need_dw {
        tape.add_grad_owned(w, dw);
    }
    if let Some(b) = bias {
        if tape.node(b).requires_grad {
            let mut db = vec![T::zero(); d.cout];
            for s in 0..d.batch {
                for c in 0..d.cout {
                    let mut acc = T::zero();
                    for &gv in &g[(s * d.cout + c) * spatial..(s * d.cout + c + 1) * spatial] {
                        acc = acc + gv;
                    }
                    db[c] = db[c] + acc;
                }
            }
            tape.add_grad_owned(b, db);
        }
    }
}
