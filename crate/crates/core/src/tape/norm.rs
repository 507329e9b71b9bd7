//! Batch normalization (per channel of NCHW) and layer normalization (over
//! the last axis). Batch statistics use the biased variance for normalizing,
//! matching the convention whose running-average update unbiases separately.

use super::{Op, Tape, TensorId};
use crate::scalar::Scalar;

/// Per-channel mean and biased variance over (batch, height, width).
pub(crate) fn channel_stats<T: Scalar>(data: &[T], b: usize, c: usize, hw: usize) -> (Vec<T>, Vec<T>) {
    let n = T::lit((b * hw) as f64);
    let mut mean = vec![T::zero(); c];
    let mut var = vec![T::zero(); c];
    for ch in 0..c {
        let mut s = T::zero();
        for s_i in 0..b {
            let base = (s_i * c + ch) * hw;
            for &v in &data[base..base + hw] {
                s = s + v;
            }
        }
        mean[ch] = s / n;
    }
    for ch in 0..c {
        let m = mean[ch];
        let mut s = T::zero();
        for s_i in 0..b {
            let base = (s_i * c + ch) * hw;
            for &v in &data[base..base + hw] {
                let d = v - m;
                s = s + d * d;
            }
        }
        var[ch] = s / n;
    }
    (mean, var)
}

impl<T: Scalar> Tape<T> {
    /// Normalize `(B,C,H,W)` per channel. In train mode the batch statistics
    /// are used and returned (so the caller can fold them into running
    /// averages); in eval mode the supplied running statistics are used and
    /// treated as constants.
    pub fn batch_norm(
        &mut self,
        x: TensorId,
        gamma: TensorId,
        beta: TensorId,
        running: Option<(&[T], &[T])>,
        eps: f64,
    ) -> (TensorId, Vec<T>, Vec<T>) {
        let shape = self.node(x).shape.clone();
        assert_eq!(shape.len(), 4, "batch_norm input must be NCHW, got {shape:?}");
        let (b, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
        assert!(b * h * w > 0, "batch_norm over an empty batch");
        assert_eq!(self.node(gamma).shape, &[c], "batch_norm gamma must be (C,)");
        assert_eq!(self.node(beta).shape, &[c], "batch_norm beta must be (C,)");
        let hw = h * w;
        let batch_stats = running.is_none();
        let (mean, var) = match running {
            Some((m, v)) => {
                assert_eq!(m.len(), c, "running mean length mismatch");
                assert_eq!(v.len(), c, "running var length mismatch");
                (m.to_vec(), v.to_vec())
            }
            None => channel_stats(&self.node(x).data, b, c, hw),
        };
        let eps_t = T::lit(eps);
        let mut out = vec![T::zero(); self.node(x).data.len()];
        {
            let data = &self.node(x).data;
            let gdata = &self.node(gamma).data;
            let bdata = &self.node(beta).data;
            for s in 0..b {
                for ch in 0..c {
                    let inv = T::one() / (var[ch] + eps_t).sqrt();
                    let (m, ga, be) = (mean[ch], gdata[ch], bdata[ch]);
                    let base = (s * c + ch) * hw;
                    for i in 0..hw {
                        out[base + i] = ga * (data[base + i] - m) * inv + be;
                    }
                }
            }
        }
        let rg = self.any_requires_grad(&[x, gamma, beta]);
        let id = self.push(
            "batch_norm",
            out,
            shape,
            rg,
            Op::BatchNorm { x, gamma, beta, mean: mean.clone(), var: var.clone(), eps: eps_t, batch_stats },
        );
        (id, mean, var)
    }

    /// Normalize the last axis of any-rank input; gamma/beta have that
    /// axis's extent.
    pub fn layer_norm(&mut self, x: TensorId, gamma: TensorId, beta: TensorId, eps: f64) -> TensorId {
        let shape = self.node(x).shape.clone();
        let k = *shape.last().expect("layer_norm needs rank >= 1");
        assert_eq!(self.node(gamma).shape, &[k], "layer_norm gamma must match last axis ({k})");
        assert_eq!(self.node(beta).shape, &[k], "layer_norm beta must match last axis ({k})");
        let rows = self.node(x).data.len() / k;
        let eps_t = T::lit(eps);
        let kn = T::lit(k as f64);
        let mut out = vec![T::zero(); self.node(x).data.len()];
        {
            let data = &self.node(x).data;
            let gdata = &self.node(gamma).data;
            let bdata = &self.node(beta).data;
            for r in 0..rows {
                let row = &data[r * k..(r + 1) * k];
                let mut mean = T::zero();
                for &v in row {
                    mean = mean + v;
                }
                mean = mean / kn;
                let mut var = T::zero();
                for &v in row {
                    let d = v - mean;
                    var = var + d * d;
                }
                var = var / kn;
                let inv = T::one() / (var + eps_t).sqrt();
                for i in 0..k {
                    out[r * k + i] = gdata[i] * (row[i] - mean) * inv + bdata[i];
                }
            }
        }
        let rg = self.any_requires_grad(&[x, gamma, beta]);
        self.push("layer_norm", out, shape, rg, Op::LayerNorm { x, gamma, beta, eps: eps_t })
    }
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn backward_batch_norm<T: Scalar>(
    tape: &mut Tape<T>,
    x: TensorId,
    gamma: TensorId,
    beta: TensorId,
    mean: &[T],
    var: &[T],
    eps: T,
    batch_stats: bool,
    g: &[T],
) {
    let shape = tape.node(x).shape.clone();
    let (b, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    let hw = h * w;
    let n = T::lit((b * hw) as f64);
    let xdata = tape.node(x).data.clone();
    let gdata = tape.node(gamma).data.clone();

    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    let mut dx = vec![T::zero(); xdata.len()];
    for ch in 0..c {
        let inv = T::one() / (var[ch] + eps).sqrt();
        let m = mean[ch];
        let mut sum_g = T::zero();
        let mut sum_g_xhat = T::zero();
        for s in 0..b {
            let base = (s * c + ch) * hw;
            for i in 0..hw {
                let gi = g[base + i];
                sum_g = sum_g + gi;
                sum_g_xhat = sum_g_xhat + gi * (xdata[base + i] - m) * inv;
            }
        }
        dgamma[ch] = sum_g_xhat;
        dbeta[ch] = sum_g;
        let ga = gdata[ch];
        if batch_stats {
            // Statistics depend on x: full chain rule.
            for s in 0..b {
                let base = (s * c + ch) * hw;
                for i in 0..hw {
                    let xhat = (xdata[base + i] - m) * inv;
                    dx[base + i] =
                        ga * inv / n * (n * g[base + i] - sum_g - xhat * sum_g_xhat);
                }
            }
        } else {
            // Running stats are constants: plain affine scaling.
            for s in 0..b {
                let base = (s * c + ch) * hw;
                for i in 0..hw {
                    dx[base + i] = ga * inv * g[base + i];
                }
            }
        }
    }
    tape.add_grad_owned(x, dx);
    tape.add_grad_owned(gamma, dgamma);
    tape.add_grad_owned(beta, dbeta);
}

pub(crate) fn backward_layer_norm<T: Scalar>(
    tape: &mut Tape<T>,
    x: TensorId,
    gamma: TensorId,
    beta: TensorId,
    eps: T,
    g: &[T],
) {
    let shape = tape.node(x).shape.clone();
    let k = *shape.last().unwrap();
    let rows = tape.node(x).data.len() / k;
    let kn = T::lit(k as f64);
    let xdata = tape.node(x).data.clone();
    let gdata = tape.node(gamma).data.clone();

    let mut dgamma = vec![T::zero(); k];
    let mut dbeta = vec![T::zero(); k];
    let mut dx = vec![T::zero(); xdata.len()];
    for r in 0..rows {
        let row = &xdata[r * k..(r + 1) * k];
        let grow = &g[r * k..(r + 1) * k];
        let mut mean = T::zero();
        for &v in row {
            mean = mean + v;
        }
        mean = mean / kn;
        let mut var = T::zero();
        for &v in row {
            let d = v - mean;
            var = var + d * d;
        }
        var = var / kn;
        let inv = T::one() / (var + eps).sqrt();
        let mut sum_dxhat = T::zero();
        let mut sum_dxhat_xhat = T::zero();
        for i in 0..k {
            let xhat = (row[i] - mean) * inv;
            let dxhat = grow[i] * gdata[i];
            dgamma[i] = dgamma[i] + grow[i] * xhat;
            dbeta[i] = dbeta[i] + grow[i];
            sum_dxhat = sum_dxhat + dxhat;
            sum_dxhat_xhat = sum_dxhat_xhat + dxhat * xhat;
        }
        for i in 0..k {
            let xhat = (row[i] - mean) * inv;
            let dxhat = grow[i] * gdata[i];
            dx[r * k + i] = inv / kn * (kn * dxhat - sum_dxhat - xhat * sum_dxhat_xhat);
        }
    }
    tape.add_grad_owned(x, dx);
    tape.add_grad_owned(gamma, dgamma);
    tape.add_grad_owned(beta, dbeta);
}
