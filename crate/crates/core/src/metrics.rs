//! Segmentation quality metrics over thresholded predictions.
//!
//! Dice and IoU are macro-averaged (computed per image, then averaged), so
//! small-object images count as much as large-object ones; precision and
//! recall are micro-averaged over pooled pixel counts. A logit of `>= 0`
//! (probability `>= 0.5`) counts as foreground; an image empty in both
//! prediction and reference scores a perfect 1.

use crate::scalar::Scalar;
use crate::tensor::Tensor;

const EPS: f64 = 1e-8;

/// Running totals; feed batches, then `finish()`.
#[derive(Clone, Debug, Default)]
pub struct MetricsAccum {
    dice_sum: f64,
    iou_sum: f64,
    images: usize,
    tp: f64,
    fp: f64,
    fnn: f64,
}

/// Final averaged metrics.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Metrics {
    pub dice: f64,
    pub iou: f64,
    pub precision: f64,
    pub recall: f64,
    pub images: usize,
}

impl MetricsAccum {
    pub fn new() -> Self {
        Self::default()
    }

    /// Accumulate one batch of logits against a binary mask, both `(B, 1, H, W)`.
    pub fn update<T: Scalar>(&mut self, logits: &Tensor<T>, mask: &Tensor<T>) {
        assert_eq!(logits.shape(), mask.shape(), "logits/mask shape mismatch");
        let sh = logits.shape();
        let (b, p) = (sh[0], sh[1..].iter().product::<usize>());
        for i in 0..b {
            let (mut tp, mut fp, mut fnn) = (0.0f64, 0.0f64, 0.0f64);
            for j in 0..p {
                let pred = logits.data()[i * p + j].to_f64() >= 0.0;
                let gt = mask.data()[i * p + j].to_f64() >= 0.5;
                match (pred, gt) {
                    (true, true) => tp += 1.0,
                    (true, false) => fp += 1.0,
                    (false, true) => fnn += 1.0,
                    (false, false) => {}
                }
            }
            self.dice_sum += (2.0 * tp + EPS) / (2.0 * tp + fp + fnn + EPS);
            self.iou_sum += (tp + EPS) / (tp + fp + fnn + EPS);
            self.images += 1;
            self.tp += tp;
            self.fp += fp;
            self.fnn += fnn;
        }
    }

    pub fn finish(&self) -> Metrics {
        let n = self.images.max(1) as f64;
        Metrics {
            dice: self.dice_sum / n,
            iou: self.iou_sum / n,
            precision: (self.tp + EPS) / (self.tp + self.fp + EPS),
            recall: (self.tp + EPS) / (self.tp + self.fnn + EPS),
            images: self.images,
        }
    }
}
