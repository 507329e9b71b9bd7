//! Decoder: fuses the two encoder pyramids coarse-to-fine into a single
//! full-resolution logit map, plus two auxiliary heads for deep supervision.
//!
//! At each of five stages the two branch features are merged by elementwise
//! product (a factorized bilinear pooling: every output cell is a
//! branch-1 x branch-2 interaction), concatenated with the 2x upsampled
//! previous decoder state, passed through a double conv, and reweighted by a
//! soft channel gate (squeeze -> bottleneck MLP -> sigmoid). Variants swap
//! the product for plain concatenation (`no_mbp`), the gate for a
//! max+avg-pooled one (`maxavg_ca`) or identity (`no_sca`), or consume a
//! single branch (`one_rf`).

use crate::config::{AblationState, ModelConfig};
use crate::encoder::EncoderOut;
use crate::layers;
use crate::params::{Forward, ParamStore};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tape::TensorId;

pub struct DecoderOut {
    /// Main head logits, `(B, 1, S, S)`.
    pub logits: TensorId,
    /// Auxiliary logits from the coarsest decoder stage, upsampled to `(B, 1, S, S)`.
    pub aux_coarse: TensorId,
    /// Auxiliary logits from the middle decoder stage, upsampled to `(B, 1, S, S)`.
    pub aux_mid: TensorId,
    /// Fused feature maps per stage, coarse to fine: stage `t` (1-based) is
    /// `(B, 16C >> (t-1), S/16 << (t-1), ...)`.
    pub stages: [TensorId; 5],
}

/// Channel width of decoder stage `t` (1-based, coarse first).
fn stage_width(base: usize, t: usize) -> usize {
    (16 * base) >> (t - 1)
}

fn fuse_name(ablation: AblationState, t: usize) -> String {
    if ablation == AblationState::NoMbp {
        format!("dec.skip{t}")
    } else {
        format!("dec.fuse{t}")
    }
}

pub fn init_decoder<T: Scalar>(store: &mut ParamStore<T>, rng: &mut Rng, cfg: &ModelConfig) {
    let c = cfg.base_channels;
    for t in 1..=5 {
        let cp = stage_width(c, t);
        let skip_in = if cfg.ablation == AblationState::NoMbp { 2 * cp } else { cp };
        let fuse_in = if t == 1 { skip_in } else { skip_in + 2 * cp };
        layers::init_double_conv(store, rng, &fuse_name(cfg.ablation, t), fuse_in, cp);
        match cfg.ablation {
            AblationState::NoSca => {}
            AblationState::MaxavgCa => {
                layers::init_linear(store, rng, &format!("dec.maxavg_ca{t}.fc1"), cp, cp / 2, true);
                layers::init_linear(store, rng, &format!("dec.maxavg_ca{t}.fc2"), cp / 2, cp, true);
            }
            _ => {
                layers::init_linear(store, rng, &format!("dec.sca{t}.fc1"), cp, cp / 2, true);
                layers::init_linear(store, rng, &format!("dec.sca{t}.fc2"), cp / 2, cp, true);
            }
        }
    }
    layers::init_conv(store, rng, "dec.head.conv", c, 1, 3, true);
    layers::init_conv(store, rng, "dec.aux1.conv", 16 * c, 1, 1, true);
    layers::init_conv(store, rng, "dec.aux3.conv", 4 * c, 1, 1, true);
}

/// Spatially averaged channel descriptor `(B, C)`.
fn channel_avg<T: Scalar>(fwd: &mut Forward<T>, x: TensorId) -> TensorId {
    let sh = fwd.tape.shape(x).to_vec();
    let (b, ch, hw) = (sh[0], sh[1], sh[2] * sh[3]);
    let flat = fwd.tape.reshape(x, &[b, ch, hw]);
    let s = fwd.tape.sum_last(flat);
    fwd.tape.mul_scalar(s, 1.0 / hw as f64)
}

/// Squeeze-and-gate: sigmoid(fc2(relu(fc1(avg)))) scales each channel.
pub(crate) fn sca_gate<T: Scalar>(fwd: &mut Forward<T>, prefix: &str, x: TensorId) -> TensorId {
    let sh = fwd.tape.shape(x).to_vec();
    let avg = channel_avg(fwd, x);
    let z = layers::linear(fwd, &format!("{prefix}.fc1"), avg);
    let z = fwd.tape.relu(z);
    let z = layers::linear(fwd, &format!("{prefix}.fc2"), z);
    let z = fwd.tape.sigmoid(z);
    let g = fwd.tape.reshape(z, &[sh[0], sh[1], 1, 1]);
    fwd.tape.mul(x, g)
}

/// Gate driven by max- and average-pooled descriptors through one shared
/// bottleneck MLP, summed before the sigmoid.
pub(crate) fn maxavg_gate<T: Scalar>(fwd: &mut Forward<T>, prefix: &str, x: TensorId) -> TensorId {
    let sh = fwd.tape.shape(x).to_vec();
    let (b, ch, hw) = (sh[0], sh[1], sh[2] * sh[3]);
    let flat = fwd.tape.reshape(x, &[b, ch, hw]);
    let mx = fwd.tape.max_last(flat);
    let avg = channel_avg(fwd, x);
    let mut gates = Vec::with_capacity(2);
    for desc in [avg, mx] {
        let z = layers::linear(fwd, &format!("{prefix}.fc1"), desc);
        let z = fwd.tape.relu(z);
        gates.push(layers::linear(fwd, &format!("{prefix}.fc2"), z));
    }
    let z = fwd.tape.add(gates[0], gates[1]);
    let z = fwd.tape.sigmoid(z);
    let g = fwd.tape.reshape(z, &[b, ch, 1, 1]);
    fwd.tape.mul(x, g)
}

fn gate<T: Scalar>(fwd: &mut Forward<T>, cfg: &ModelConfig, t: usize, x: TensorId) -> TensorId {
    match cfg.ablation {
        AblationState::NoSca => x,
        AblationState::MaxavgCa => maxavg_gate(fwd, &format!("dec.maxavg_ca{t}"), x),
        _ => sca_gate(fwd, &format!("dec.sca{t}"), x),
    }
}

/// Run the decoder over the encoder pyramids.
pub fn decode<T: Scalar>(fwd: &mut Forward<T>, cfg: &ModelConfig, enc: &EncoderOut) -> DecoderOut {
    let mut y_prev: Option<TensorId> = None;
    let mut ys = Vec::with_capacity(5);
    for t in 1..=5 {
        let e = &enc.stages[5 - t];
        let skip = match cfg.ablation {
            AblationState::OneRf => e[0],
            AblationState::NoMbp => fwd.tape.concat(&[e[0], e[1]], 1),
            _ => fwd.tape.mul(e[0], e[1]),
        };
        let inp = match y_prev {
            None => skip,
            Some(y) => {
                let sh = fwd.tape.shape(skip).to_vec();
                let up = fwd.tape.bilinear(y, sh[2], sh[3]);
                fwd.tape.concat(&[skip, up], 1)
            }
        };
        let y = layers::double_conv(fwd, &fuse_name(cfg.ablation, t), inp);
        let y = gate(fwd, cfg, t, y);
        ys.push(y);
        y_prev = Some(y);
    }
    let full = fwd.tape.shape(ys[4]).to_vec();
    let (s_h, s_w) = (full[2], full[3]);
    let logits = layers::conv(fwd, "dec.head.conv", ys[4], 1, 1, 1);
    let a1 = layers::conv(fwd, "dec.aux1.conv", ys[0], 1, 1, 0);
    let aux_coarse = fwd.tape.bilinear(a1, s_h, s_w);
    let a3 = layers::conv(fwd, "dec.aux3.conv", ys[2], 1, 1, 0);
    let aux_mid = fwd.tape.bilinear(a3, s_h, s_w);
    DecoderOut { logits, aux_coarse, aux_mid, stages: [ys[0], ys[1], ys[2], ys[3], ys[4]] }
}
