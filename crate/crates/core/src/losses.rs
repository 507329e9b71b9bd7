//! Composite segmentation loss with deep supervision.
//!
//! Each supervised head pays three complementary penalties, every one
//! computed per image and averaged over the batch:
//!
//! - boundary-weighted binary cross-entropy, numerically stable via
//!   `softplus(x) - x*g` so extreme logits stay finite;
//! - boundary-weighted soft IoU, `1 - (inter + 1) / (union - inter + 1)`;
//! - Tversky loss, `1 - (TP + s) / (TP + eta*FP + gamma*FN + s)`, which at
//!   `eta = gamma = 0.5` reduces to soft Dice.
//!
//! Boundary weights `1 + gain * |avgpool(g) - g|` emphasize pixels whose
//! neighborhood disagrees with them — the object rim — and are constants
//! with respect to the network.
//!
//! The total is a convex combination over the main head and two auxiliary
//! heads.

use crate::config::LossConfig;
use crate::params::Forward;
use crate::scalar::Scalar;
use crate::tape::{Tape, TensorId};
use crate::tensor::Tensor;

/// `1 + gain * |avgpool_k(g) - g|` on a `(B, 1, H, W)` mask; the pool is
/// stride-1, zero-padded, and divides by `k*k` everywhere (pad counts as
/// background, so image borders of a foreground region register as edges).
pub fn boundary_weights<T: Scalar>(mask: &Tensor<T>, gain: f64, k: usize) -> Tensor<T> {
    let sh = mask.shape();
    assert_eq!(sh.len(), 4, "mask must be (B,1,H,W), got {sh:?}");
    assert!(k % 2 == 1, "pool size must be odd, got {k}");
    let (b, h, w) = (sh[0], sh[2], sh[3]);
    let pad = (k - 1) / 2;
    let inv = 1.0 / (k * k) as f64;
    let mut out = Tensor::zeros(sh);
    for bi in 0..b {
        let base = bi * h * w;
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0f64;
                for dy in 0..k {
                    let yy = y + dy;
                    if yy < pad || yy - pad >= h {
                        continue;
                    }
                    for dx in 0..k {
                        let xx = x + dx;
                        if xx < pad || xx - pad >= w {
                            continue;
                        }
                        acc += mask.data()[base + (yy - pad) * w + (xx - pad)].to_f64();
                    }
                }
                let g = mask.data()[base + y * w + x].to_f64();
                out.data_mut()[base + y * w + x] = T::lit(1.0 + gain * (acc * inv - g).abs());
            }
        }
    }
    out
}

/// Per-image sum of all trailing axes: `(B, ...) -> (B,)`.
fn per_image_sum<T: Scalar>(tape: &mut Tape<T>, x: TensorId) -> TensorId {
    let sh = tape.shape(x).to_vec();
    let b = sh[0];
    let p: usize = sh[1..].iter().product();
    let flat = tape.reshape(x, &[b, p]);
    tape.sum_last(flat)
}

/// Weighted cross-entropy from logits: per image
/// `sum(w * (softplus(x) - x*g)) / sum(w)`, averaged over the batch.
pub fn weighted_bce<T: Scalar>(tape: &mut Tape<T>, logits: TensorId, mask: TensorId, w: TensorId) -> TensorId {
    let sp = tape.softplus(logits);
    let xg = tape.mul(logits, mask);
    let ce = tape.sub(sp, xg);
    let wce = tape.mul(ce, w);
    let num = per_image_sum(tape, wce);
    let den = per_image_sum(tape, w);
    let ratio = tape.div(num, den);
    tape.mean(ratio)
}

/// Weighted soft IoU loss from logits: with `p = sigmoid(x)`, per image
/// `1 - (sum(w*p*g) + 1) / (sum(w*(p + g - p*g)) + 1)`, batch-averaged.
pub fn weighted_iou<T: Scalar>(tape: &mut Tape<T>, logits: TensorId, mask: TensorId, w: TensorId) -> TensorId {
    let p = tape.sigmoid(logits);
    let pg = tape.mul(p, mask);
    let inter_px = tape.mul(pg, w);
    let inter = per_image_sum(tape, inter_px);
    let sum_pg = tape.add(p, mask);
    let both_px = tape.mul(sum_pg, w);
    let both = per_image_sum(tape, both_px);
    let inter1 = tape.add_scalar(inter, 1.0);
    // union = sum(w*(p + g)) - inter, i.e. sum(w*(p + g - p*g)).
    let denom = tape.sub(both, inter);
    let denom1 = tape.add_scalar(denom, 1.0);
    let iou = tape.div(inter1, denom1);
    let neg = tape.mul_scalar(iou, -1.0);
    let loss = tape.add_scalar(neg, 1.0);
    tape.mean(loss)
}

/// Tversky loss from logits, per image, batch-averaged. `eta` weights false
/// positives, `gamma` false negatives.
pub fn tversky<T: Scalar>(
    tape: &mut Tape<T>,
    logits: TensorId,
    mask: TensorId,
    eta: f64,
    gamma: f64,
    smooth: f64,
) -> TensorId {
    let p = tape.sigmoid(logits);
    let tp_px = tape.mul(p, mask);
    let tp = per_image_sum(tape, tp_px);
    let fp_px = tape.sub(p, tp_px);
    let fp = per_image_sum(tape, fp_px);
    let fn_px = tape.sub(mask, tp_px);
    let fneg = per_image_sum(tape, fn_px);
    let num = tape.add_scalar(tp, smooth);
    let fp_w = tape.mul_scalar(fp, eta);
    let fn_w = tape.mul_scalar(fneg, gamma);
    let den = tape.add(tp, fp_w);
    let den = tape.add(den, fn_w);
    let den = tape.add_scalar(den, smooth);
    let ti = tape.div(num, den);
    let neg = tape.mul_scalar(ti, -1.0);
    let loss = tape.add_scalar(neg, 1.0);
    tape.mean(loss)
}

/// Loss for one supervised head: weighted BCE + weighted IoU + Tversky.
pub fn stage_loss<T: Scalar>(
    tape: &mut Tape<T>,
    cfg: &LossConfig,
    logits: TensorId,
    mask: &Tensor<T>,
) -> TensorId {
    let w = boundary_weights(mask, cfg.boundary_gain, cfg.boundary_pool);
    let m = tape.constant(mask.clone());
    let wc = tape.constant(w);
    let bce = weighted_bce(tape, logits, m, wc);
    let iou = weighted_iou(tape, logits, m, wc);
    let tv = tversky(tape, logits, m, cfg.eta, cfg.gamma, cfg.smooth);
    let s = tape.add(bce, iou);
    tape.add(s, tv)
}

/// Convex combination of the three head losses.
pub fn combine_stage_losses<T: Scalar>(
    tape: &mut Tape<T>,
    cfg: &LossConfig,
    main: TensorId,
    aux_coarse: TensorId,
    aux_mid: TensorId,
) -> TensorId {
    let a = tape.mul_scalar(main, cfg.a);
    let b = tape.mul_scalar(aux_coarse, cfg.b);
    let c = tape.mul_scalar(aux_mid, cfg.c);
    let s = tape.add(a, b);
    tape.add(s, c)
}

/// Deep-supervision total over a model output.
pub fn total_loss<T: Scalar>(
    fwd: &mut Forward<T>,
    cfg: &LossConfig,
    out: &crate::model::ModelOut,
    mask: &Tensor<T>,
) -> TensorId {
    let main = stage_loss(fwd.tape, cfg, out.logits, mask);
    let a1 = stage_loss(fwd.tape, cfg, out.aux_coarse, mask);
    let a3 = stage_loss(fwd.tape, cfg, out.aux_mid, mask);
    combine_stage_losses(fwd.tape, cfg, main, a1, a3)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> LossConfig {
        LossConfig::default()
    }

    fn scalar_of(tape: &Tape<f64>, id: TensorId) -> f64 {
        assert_eq!(tape.numel(id), 1);
        tape.data(id)[0]
    }

    #[test]
    fn boundary_weights_flat_mask_is_all_ones() {
        for fill in [0.0, 1.0] {
            let m = Tensor::full(&[1, 1, 9, 9], fill);
            let w = boundary_weights(&m, 5.0, 3);
            if fill == 0.0 {
                assert!(w.data().iter().all(|&v| v == 1.0));
            } else {
                // Interior is flat; borders see zero padding and score as edges.
                assert_eq!(w.at(&[0, 0, 4, 4]), 1.0);
                assert!(w.at(&[0, 0, 0, 0]) > 1.0);
            }
        }
    }

    #[test]
    fn boundary_weights_peak_on_the_rim() {
        // Single foreground pixel: its own weight and its neighbors' exceed
        // the far field, with the maximum at the pixel itself.
        let mut m: Tensor<f64> = Tensor::zeros(&[1, 1, 9, 9]);
        m.set(&[0, 0, 4, 4], 1.0);
        let w = boundary_weights(&m, 5.0, 3);
        // Center: |1/9 - 1| = 8/9 -> 1 + 40/9.
        assert!((w.at(&[0, 0, 4, 4]) - (1.0 + 5.0 * 8.0 / 9.0)).abs() < 1e-12);
        // Touching neighbor: |1/9 - 0| -> 1 + 5/9.
        assert!((w.at(&[0, 0, 4, 5]) - (1.0 + 5.0 / 9.0)).abs() < 1e-12);
        // Far away: exactly 1.
        assert_eq!(w.at(&[0, 0, 0, 0]), 1.0);
    }

    #[test]
    fn bce_of_zero_logits_is_ln_two() {
        let mut tape = Tape::new(0);
        let x = tape.constant(Tensor::zeros(&[2, 1, 2, 2]));
        let g = tape.constant(Tensor::from_fn(&[2, 1, 2, 2], |i| (i % 2) as f64));
        let w = tape.constant(Tensor::full(&[2, 1, 2, 2], 1.0));
        let l = weighted_bce(&mut tape, x, g, w);
        assert!((scalar_of(&tape, l) - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn bce_survives_extreme_logits() {
        let mut tape = Tape::new(0);
        let x = tape.constant(Tensor::new(&[1, 1, 1, 2], vec![400.0, -400.0]));
        let g = tape.constant(Tensor::new(&[1, 1, 1, 2], vec![1.0, 0.0]));
        let w = tape.constant(Tensor::full(&[1, 1, 1, 2], 1.0));
        let l = weighted_bce(&mut tape, x, g, w);
        // softplus(-400) = e^-400, astronomically small but never exactly 0.
        assert!(scalar_of(&tape, l) < 1e-100, "perfect confident predictions cost ~nothing");
        assert!(tape.first_nonfinite().is_none());
    }

    #[test]
    fn weighting_moves_bce_toward_upweighted_pixels() {
        // Pixel 0 correct, pixel 1 wrong; upweighting the wrong pixel must
        // raise the loss above the uniform value.
        let mut tape = Tape::new(0);
        let x = tape.constant(Tensor::new(&[1, 1, 1, 2], vec![3.0, 3.0]));
        let g = tape.constant(Tensor::new(&[1, 1, 1, 2], vec![1.0, 0.0]));
        let wu = tape.constant(Tensor::new(&[1, 1, 1, 2], vec![1.0, 1.0]));
        let ww = tape.constant(Tensor::new(&[1, 1, 1, 2], vec![1.0, 9.0]));
        let lu = weighted_bce(&mut tape, x, g, wu);
        let lw = weighted_bce(&mut tape, x, g, ww);
        assert!(scalar_of(&tape, lw) > scalar_of(&tape, lu));
    }

    #[test]
    fn wiou_frozen_five_pixel_value() {
        // p ~ 1 everywhere (huge logits), g marks one of five pixels:
        // inter 1, union 6 -> 1 - (1+1)/(6-1+1) = 1 - 2/6.
        let mut tape = Tape::new(0);
        let x = tape.constant(Tensor::full(&[1, 1, 1, 5], 40.0));
        let g = tape.constant(Tensor::new(&[1, 1, 1, 5], vec![1.0, 0.0, 0.0, 0.0, 0.0]));
        let w = tape.constant(Tensor::full(&[1, 1, 1, 5], 1.0));
        let l = weighted_iou(&mut tape, x, g, w);
        assert!((scalar_of(&tape, l) - (1.0 - 2.0 / 6.0)).abs() < 1e-12);
    }

    #[test]
    fn wiou_perfect_prediction_costs_zero() {
        let mut tape = Tape::new(0);
        let x = tape.constant(Tensor::new(&[1, 1, 1, 4], vec![40.0, -40.0, 40.0, -40.0]));
        let g = tape.constant(Tensor::new(&[1, 1, 1, 4], vec![1.0, 0.0, 1.0, 0.0]));
        let w = tape.constant(Tensor::full(&[1, 1, 1, 4], 1.0));
        let l = weighted_iou(&mut tape, x, g, w);
        assert!(scalar_of(&tape, l).abs() < 1e-12);
    }

    #[test]
    fn tversky_frozen_half_for_uninformative_logits() {
        // p = 0.5 everywhere, g = [1, 0]: TP = FP = FN = 0.5, and with
        // eta + gamma = 1 the denominator is exactly 1.
        let mut tape = Tape::new(0);
        let x = tape.constant(Tensor::zeros(&[1, 1, 1, 2]));
        let g = tape.constant(Tensor::new(&[1, 1, 1, 2], vec![1.0, 0.0]));
        let l = tversky(&mut tape, x, g, 0.7, 0.3, 0.0);
        assert!((scalar_of(&tape, l) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn tversky_at_half_half_is_soft_dice() {
        // eta = gamma = 0.5 makes the index 2TP/(2TP+FP+FN) after scaling:
        // compare against a directly computed soft Dice.
        let probs = [0.9, 0.2, 0.7, 0.4];
        let gts = [1.0, 0.0, 0.0, 1.0];
        let logits: Vec<f64> = probs.iter().map(|p: &f64| (p / (1.0 - p)).ln()).collect();
        let mut tape = Tape::new(0);
        let x = tape.constant(Tensor::new(&[1, 1, 1, 4], logits));
        let g = tape.constant(Tensor::new(&[1, 1, 1, 4], gts.to_vec()));
        let l = tversky(&mut tape, x, g, 0.5, 0.5, 0.0);
        let tp: f64 = probs.iter().zip(&gts).map(|(p, g)| p * g).sum();
        let psum: f64 = probs.iter().sum();
        let gsum: f64 = gts.iter().sum();
        let dice = 2.0 * tp / (psum + gsum);
        assert!((scalar_of(&tape, l) - (1.0 - dice)).abs() < 1e-10);
    }

    #[test]
    fn tversky_asymmetry_penalizes_false_positives_harder() {
        // Same logits, two masks: one makes the error an FP, one an FN.
        // With eta > gamma the FP variant must cost more.
        let mut tape = Tape::new(0);
        let x = tape.constant(Tensor::new(&[1, 1, 1, 3], vec![40.0, 40.0, -40.0]));
        let g_fp = tape.constant(Tensor::new(&[1, 1, 1, 3], vec![1.0, 0.0, 0.0]));
        let g_fn = tape.constant(Tensor::new(&[1, 1, 1, 3], vec![1.0, 1.0, 1.0]));
        let l_fp = tversky(&mut tape, x, g_fp, 0.7, 0.3, 1e-6);
        let l_fn = tversky(&mut tape, x, g_fn, 0.7, 0.3, 1e-6);
        assert!(scalar_of(&tape, l_fp) > scalar_of(&tape, l_fn));
    }

    #[test]
    fn per_image_reduction_is_macro_not_micro() {
        // Two images whose pixel-pooled loss would differ from the mean of
        // per-image losses: image A tiny object perfectly hit, image B
        // object fully missed.
        let mut tape = Tape::new(0);
        let x = tape.constant(Tensor::new(&[2, 1, 1, 2], vec![40.0, -40.0, -40.0, -40.0]));
        let g = tape.constant(Tensor::new(&[2, 1, 1, 2], vec![1.0, 0.0, 1.0, 1.0]));
        let l = tversky(&mut tape, x, g, 0.7, 0.3, 0.0);
        // Image A: TI = 1 -> loss 0. Image B: TP 0, FN 2 -> TI 0 -> loss 1.
        assert!((scalar_of(&tape, l) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn combination_weights_are_frozen() {
        let mut tape = Tape::new(0);
        let l1 = tape.constant(Tensor::scalar(1.0));
        let l2 = tape.constant(Tensor::scalar(0.2));
        let l3 = tape.constant(Tensor::scalar(0.3));
        let t = combine_stage_losses(&mut tape, &cfg(), l1, l2, l3);
        assert!((scalar_of(&tape, t) - 0.7).abs() < 1e-12);
    }

    #[test]
    fn stage_loss_is_finite_and_positive_on_random_logits() {
        let mut tape = Tape::new(0);
        let x = tape.constant(Tensor::from_fn(&[2, 1, 8, 8], |i| ((i as f64) * 0.37).sin() * 3.0));
        let mut mask = Tensor::zeros(&[2, 1, 8, 8]);
        for y in 2..6 {
            for xx in 2..6 {
                mask.set(&[0, 0, y, xx], 1.0);
                mask.set(&[1, 0, y, xx], 1.0);
            }
        }
        let l = stage_loss(&mut tape, &cfg(), x, &mask);
        let v = scalar_of(&tape, l);
        assert!(v.is_finite() && v > 0.0);
        assert!(tape.first_nonfinite().is_none());
    }

    #[test]
    fn gradcheck_full_stage_loss() {
        let c = cfg();
        let mut mask = Tensor::zeros(&[1, 1, 4, 4]);
        for y in 1..3 {
            for x in 1..3 {
                mask.set(&[0, 0, y, x], 1.0);
            }
        }
        let logits = Tensor::from_fn(&[1, 1, 4, 4], |i| ((i as f64) * 0.71).sin());
        let report = crate::gradcheck::gradcheck(
            "stage_loss",
            &[logits],
            crate::gradcheck::GradcheckCfg::default(),
            move |tape, ids| stage_loss(tape, &c, ids[0], &mask),
        );
        assert!(report.pass, "{}", report.line());
    }
}
