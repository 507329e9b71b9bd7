//! Five-stage dual-receptive-field encoder.
//!
//! Stages 1-2 are convolutional: a stem at two dilations (branch 1 sees a
//! 3x3 field, branch 2 a dilated 5x5 field over the same kernel size) and a
//! strided 2x2 downsampling conv. Stage 3 embeds tokens by exponentially
//! weighted pooling plus a linear projection (or plain patch flattening in
//! the `no_ape` variant). Stages 3-5 run window-attention blocks in
//! plain/shifted pairs, halving the grid between stages via patch merging.
//! In the full model the two branches are tied through coupled attention:
//! one shared softmax reweights both value streams.
//!
//! Every stage's feature map (both branches, NCHW) is exported for the
//! decoder.

use crate::attention::{
    coupled_window_attention, init_coupled_attention, init_single_attention, shift_mask,
    single_window_attention, window_partition, window_reverse,
};
pub use crate::attention::AttnSpec;
use crate::config::{AblationState, ModelConfig};
use crate::layers;
use crate::params::{Forward, ParamStore};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tape::TensorId;

/// Branch name list for an ablation state; branch index doubles as
/// `dilation - 1` in the stem.
pub fn branch_names(ablation: AblationState) -> &'static [&'static str] {
    if ablation.dual_branch() {
        &["br1", "br2"]
    } else {
        &["br1"]
    }
}

/// Cyclic shift for block `blk` of a stage: odd blocks shift by half a
/// window, except when the window already tiles the whole grid (or is a
/// single token), where shifting would be a no-op permutation of the same
/// neighborhood.
pub fn shift_for(blk: usize, grid: usize, win: usize) -> usize {
    if blk % 2 == 1 && grid > win && win >= 2 {
        win / 2
    } else {
        0
    }
}

/// Per-branch feature pyramids; `stages[s][br]` is NCHW with channels
/// `C << min(s, 4)`... concretely `[C, 2C, 4C, 8C, 16C]` at resolutions
/// `[S, S/2, S/4, S/8, S/16]`.
pub struct EncoderOut {
    pub stages: [Vec<TensorId>; 5],
}

pub fn init_encoder<T: Scalar>(store: &mut ParamStore<T>, rng: &mut Rng, cfg: &ModelConfig) {
    let c = cfg.base_channels;
    let branches = branch_names(cfg.ablation);
    for br in branches {
        layers::init_conv_bn_relu(store, rng, &format!("enc.stem.{br}"), 3, c, 3);
        layers::init_conv(store, rng, &format!("enc.down.{br}.conv"), c, 2 * c, 2, true);
        if cfg.ablation == AblationState::NoApe {
            layers::init_linear(store, rng, &format!("enc.embed.{br}.flat_fc"), 8 * c, 4 * c, true);
        } else {
            layers::init_linear(store, rng, &format!("enc.embed.{br}.fc"), 2 * c, 4 * c, true);
        }
    }
    for (si, s) in [3usize, 4, 5].into_iter().enumerate() {
        let ch = (4 * c) << si;
        let hidden = cfg.hidden_dim << si;
        let spec = AttnSpec { ch, hidden, heads: cfg.heads };
        if s > 3 {
            let prev = ch / 2;
            for br in branches {
                layers::init_layer_norm(store, &format!("enc.merge{s}.{br}.norm"), 4 * prev);
                layers::init_linear(store, rng, &format!("enc.merge{s}.{br}.fc"), 4 * prev, ch, false);
            }
        }
        for blk in 0..cfg.blocks_per_stage {
            let p = format!("enc.s{s}.b{blk}");
            for br in branches {
                layers::init_layer_norm(store, &format!("{p}.norm1.{br}"), ch);
                layers::init_layer_norm(store, &format!("{p}.norm2.{br}"), ch);
                layers::init_token_mlp(store, rng, &format!("{p}.mlp.{br}"), ch);
            }
            if cfg.ablation.coupled_attention() {
                init_coupled_attention(store, rng, &format!("{p}.hmsa"), spec, cfg.pos_bias, cfg.window);
            } else {
                for br in branches {
                    init_single_attention(store, rng, &format!("{p}.msa"), br, spec, cfg.pos_bias, cfg.window);
                }
            }
        }
    }
}

/// Halve a token grid `(B, g, g, ch)` by concatenating each 2x2 cell
/// (channels x4), normalizing, and projecting to `2*ch` without bias.
fn patch_merge<T: Scalar>(fwd: &mut Forward<T>, prefix: &str, x: TensorId, eps: f64) -> TensorId {
    let sh = fwd.tape.shape(x).to_vec();
    let (b, g, ch) = (sh[0], sh[1], sh[3]);
    let r = fwd.tape.reshape(x, &[b, g / 2, 2, g / 2, 2, ch]);
    let p = fwd.tape.permute(r, &[0, 1, 3, 2, 4, 5]);
    let m = fwd.tape.reshape(p, &[b, g / 2, g / 2, 4 * ch]);
    let n = layers::layer_norm(fwd, &format!("{prefix}.norm"), m, eps);
    layers::linear(fwd, &format!("{prefix}.fc"), n)
}

/// One pre-norm transformer block over token grids `(B, g, g, ch)`:
/// window attention (optionally shifted, optionally cross-branch coupled)
/// plus a per-token MLP, each behind a residual with dropout.
#[allow(clippy::too_many_arguments)]
fn hst_block<T: Scalar>(
    fwd: &mut Forward<T>,
    prefix: &str,
    toks: &mut [TensorId],
    branches: &[&str],
    coupled: bool,
    grid: usize,
    win: usize,
    shift: usize,
    spec: AttnSpec,
    drop: f64,
    eps: f64,
) {
    let b = fwd.tape.shape(toks[0])[0];
    let mask = (shift > 0).then(|| shift_mask::<T>(grid, grid, win, shift));
    let s = shift as isize;

    let mut windows = Vec::with_capacity(toks.len());
    let mut wnd = None;
    for (bi, br) in branches.iter().enumerate() {
        let n1 = layers::layer_norm(fwd, &format!("{prefix}.norm1.{br}"), toks[bi], eps);
        let rolled = if shift > 0 { fwd.tape.roll(n1, &[0, -s, -s, 0]) } else { n1 };
        let (part, w) = window_partition(fwd.tape, rolled, win);
        windows.push(part);
        wnd = Some(w);
    }
    let wnd = wnd.unwrap();

    let zs: Vec<TensorId> = if coupled {
        let out = coupled_window_attention(
            fwd,
            &format!("{prefix}.hmsa"),
            windows[0],
            windows[1],
            wnd,
            spec,
            mask.as_ref(),
        );
        vec![out.z1, out.z2]
    } else {
        let mut zs = Vec::with_capacity(branches.len());
        for (bi, br) in branches.iter().enumerate() {
            let (z, _) = single_window_attention(
                fwd,
                &format!("{prefix}.msa"),
                br,
                windows[bi],
                wnd,
                spec,
                mask.as_ref(),
            );
            zs.push(z);
        }
        zs
    };

    for (bi, &z) in zs.iter().enumerate() {
        let z = window_reverse(fwd.tape, z, win, b, grid, grid);
        let z = if shift > 0 { fwd.tape.roll(z, &[0, s, s, 0]) } else { z };
        let z = fwd.tape.dropout(z, drop);
        toks[bi] = fwd.tape.add(toks[bi], z);
    }
    for (bi, br) in branches.iter().enumerate() {
        let n2 = layers::layer_norm(fwd, &format!("{prefix}.norm2.{br}"), toks[bi], eps);
        let m = layers::token_mlp(fwd, &format!("{prefix}.mlp.{br}"), n2);
        let m = fwd.tape.dropout(m, drop);
        toks[bi] = fwd.tape.add(toks[bi], m);
    }
}

/// Run the encoder on an input batch `(B, 3, S, S)`.
pub fn encode<T: Scalar>(fwd: &mut Forward<T>, cfg: &ModelConfig, x: TensorId) -> EncoderOut {
    let shape = fwd.tape.shape(x).to_vec();
    assert_eq!(shape.len(), 4, "encoder expects (B,3,S,S), got {shape:?}");
    let (b, size) = (shape[0], shape[2]);
    let c = cfg.base_channels;
    let branches = branch_names(cfg.ablation);
    let eps = cfg.norm_eps;

    // Stage 1: dual-dilation stem at full resolution.
    let mut s1 = Vec::with_capacity(branches.len());
    for (bi, br) in branches.iter().enumerate() {
        let dil = bi + 1;
        s1.push(layers::conv_bn_relu(fwd, &format!("enc.stem.{br}"), x, 1, dil, dil));
    }
    // Stage 2: strided 2x2 conv, C -> 2C.
    let mut s2 = Vec::with_capacity(branches.len());
    for (bi, br) in branches.iter().enumerate() {
        s2.push(layers::conv(fwd, &format!("enc.down.{br}.conv"), s1[bi], 2, 1, 0));
    }

    // Stage 3 token embedding at grid S/4.
    let g3 = size / 4;
    let mut toks = Vec::with_capacity(branches.len());
    for (bi, br) in branches.iter().enumerate() {
        let t = if cfg.ablation == AblationState::NoApe {
            // Plain patch embedding: flatten each 2x2 cell and project.
            let r = fwd.tape.reshape(s2[bi], &[b, 2 * c, g3, 2, g3, 2]);
            let p = fwd.tape.permute(r, &[0, 2, 4, 1, 3, 5]);
            let fl = fwd.tape.reshape(p, &[b, g3, g3, 8 * c]);
            layers::linear(fwd, &format!("enc.embed.{br}.flat_fc"), fl)
        } else {
            // Attention-weighted pooling keeps strong activations alive
            // through the downsample, then a linear lift to 4C.
            let pooled = fwd.tape.softpool2d(s2[bi], 2, 2);
            let p = fwd.tape.permute(pooled, &[0, 2, 3, 1]);
            layers::linear(fwd, &format!("enc.embed.{br}.fc"), p)
        };
        toks.push(t);
    }

    let mut grid = g3;
    let mut stage_maps: Vec<Vec<TensorId>> = Vec::with_capacity(3);
    for (si, s) in [3usize, 4, 5].into_iter().enumerate() {
        let ch = (4 * c) << si;
        let hidden = cfg.hidden_dim << si;
        let spec = AttnSpec { ch, hidden, heads: cfg.heads };
        if s > 3 {
            for (bi, br) in branches.iter().enumerate() {
                toks[bi] = patch_merge(fwd, &format!("enc.merge{s}.{br}"), toks[bi], eps);
            }
            grid /= 2;
        }
        for blk in 0..cfg.blocks_per_stage {
            let shift = shift_for(blk, grid, cfg.window);
            hst_block(
                fwd,
                &format!("enc.s{s}.b{blk}"),
                &mut toks,
                branches,
                cfg.ablation.coupled_attention(),
                grid,
                cfg.window,
                shift,
                spec,
                cfg.dropout,
                eps,
            );
        }
        let mut maps = Vec::with_capacity(branches.len());
        for &t in &toks {
            maps.push(fwd.tape.permute(t, &[0, 3, 1, 2]));
        }
        stage_maps.push(maps);
    }

    let [m3, m4, m5] = <[Vec<TensorId>; 3]>::try_from(stage_maps).unwrap();
    EncoderOut { stages: [s1, s2, m3, m4, m5] }
}
