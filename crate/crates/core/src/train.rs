//! Training loop. Every stochastic choice (batch order, augmentation,
//! dropout) is re-derived from `(seed, step)`, so resuming from a
//! checkpoint continues bit-identically to the uninterrupted run.
//!
//! Progress is streamed as one JSON object per line: `step`, `eval`, and
//! `checkpoint` events.

use std::io::Write;
use std::path::Path;

use crate::checkpoint::{self, LoadedCheckpoint};
use crate::config::{ModelConfig, RunConfig};
use crate::data::{augment, stack, Sample};
use crate::error::{Error, Result};
use crate::layers::apply_stats_updates;
use crate::losses::total_loss;
use crate::metrics::{Metrics, MetricsAccum};
use crate::model::{model_forward, new_model};
use crate::optim::{lr_at, AdamW};
use crate::params::{Forward, ParamStore};
use crate::rng::Rng;
use crate::tape::Tape;
use crate::tensor::Tensor;

// Purpose tags in the high half of an rng stream label; the step index
// rides in the low half.
const PURPOSE_BATCH: u64 = 1;
const PURPOSE_AUG: u64 = 2;
const PURPOSE_DROPOUT: u64 = 3;

fn stream(purpose: u64, step: u64) -> u64 {
    (purpose << 32) | (step & 0xffff_ffff)
}

/// splitmix64-style mix of seed and label into a fresh tape seed.
fn mix(seed: u64, label: u64) -> u64 {
    let mut z = seed ^ label.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub struct TrainOutcome {
    pub steps: u64,
    pub final_loss: f64,
    /// Metrics over the training split at the final parameters.
    pub train_metrics: Metrics,
}

pub struct Trainer {
    pub run: RunConfig,
    pub store: ParamStore<f32>,
    pub opt: AdamW<f32>,
    /// Completed optimizer steps.
    pub step: u64,
}

impl Trainer {
    pub fn new(run: RunConfig) -> Trainer {
        let store = new_model(&run.model, run.seed);
        let opt = AdamW::new(run.train.weight_decay);
        Trainer { run, store, opt, step: 0 }
    }

    pub fn from_checkpoint(loaded: LoadedCheckpoint) -> Trainer {
        Trainer { run: loaded.run, store: loaded.store, opt: loaded.opt, step: loaded.step }
    }

    fn pick_batch(&self, n: usize, step: u64) -> Vec<usize> {
        let bs = self.run.train.batch_size.min(n);
        if self.run.data.keep_order {
            (0..bs).map(|j| (step as usize * bs + j) % n).collect()
        } else {
            let mut rng = Rng::derive(self.run.seed, stream(PURPOSE_BATCH, step));
            (0..bs).map(|_| rng.index(n)).collect()
        }
    }

    fn build_batch(&self, data: &[Sample], step: u64) -> (Tensor<f32>, Tensor<f32>) {
        let idx = self.pick_batch(data.len(), step);
        let (flip_on, rot_on) = (self.run.data.flip_augment, self.run.data.rot_augment);
        if !flip_on && !rot_on {
            let refs: Vec<&Sample> = idx.iter().map(|&i| &data[i]).collect();
            return stack(&refs);
        }
        let mut rng = Rng::derive(self.run.seed, stream(PURPOSE_AUG, step));
        let augmented: Vec<Sample> = idx
            .iter()
            .map(|&i| {
                let flip = flip_on && rng.uniform01() < 0.5;
                let turns = if rot_on { rng.index(4) } else { 0 };
                augment(&data[i], flip, turns)
            })
            .collect();
        let refs: Vec<&Sample> = augmented.iter().collect();
        stack(&refs)
    }

    /// One optimizer step on a prepared batch; returns `(loss, grad_norm)`.
    pub fn train_step(&mut self, images: &Tensor<f32>, masks: &Tensor<f32>, lr: f64) -> Result<(f64, f64)> {
        let step = self.step;
        let mut tape = Tape::new(mix(self.run.seed, stream(PURPOSE_DROPOUT, step)));
        tape.set_train(true);
        let x = tape.constant(images.clone());
        let mut fwd = Forward::new(&mut tape, &self.store);
        let out = model_forward(&mut fwd, &self.run.model, x);
        let loss = total_loss(&mut fwd, &self.run.loss, &out, masks);
        if let Some(nf) = fwd.tape.first_nonfinite() {
            return Err(Error::NonFinite { op: nf.op.to_string(), step });
        }
        fwd.tape.backward(loss);
        let loss_val = fwd.tape.data(loss)[0] as f64;
        let grads = fwd.collect_grads();
        let stats = std::mem::take(&mut fwd.stats_updates);

        let mut sq = 0.0f64;
        for (_, g) in &grads {
            for &v in g {
                sq += v as f64 * v as f64;
            }
        }
        let grad_norm = sq.sqrt();
        if !grad_norm.is_finite() {
            return Err(Error::NonFinite { op: "backward".into(), step });
        }
        self.opt.apply(&mut self.store, &grads, lr, self.run.train.grad_clip);
        apply_stats_updates(&mut self.store, &stats);
        self.step += 1;
        Ok((loss_val, grad_norm))
    }

    /// Run from the current step to `train.steps`, logging JSONL events to
    /// `log` and (when `ckpt_dir` is given) writing periodic checkpoints
    /// plus one at the end.
    pub fn train(&mut self, data: &[Sample], log: &mut dyn Write, ckpt_dir: Option<&Path>) -> Result<TrainOutcome> {
        assert!(!data.is_empty(), "training requires at least one sample");
        let total = self.run.train.steps;
        let warmup = self.run.train.warmup();
        let emit = |log: &mut dyn Write, v: serde_json::Value| -> Result<()> {
            writeln!(log, "{v}").map_err(|e| Error::io("log", e))
        };
        let mut last_loss = f64::NAN;
        while self.step < total {
            let s = self.step;
            let (images, masks) = self.build_batch(data, s);
            let lr = lr_at(s, total, warmup, self.run.train.lr_max, self.run.train.lr_min);
            let (loss, grad_norm) = self.train_step(&images, &masks, lr)?;
            last_loss = loss;
            let done = self.step;
            emit(log, serde_json::json!({
                "event": "step", "step": done, "lr": lr, "loss": loss, "grad_norm": grad_norm,
            }))?;
            if done % self.run.train.eval_every == 0 || done == total {
                let m = evaluate(&self.store, &self.run.model, data, self.run.train.batch_size);
                emit(log, serde_json::json!({
                    "event": "eval", "step": done, "dice": m.dice, "iou": m.iou,
                    "precision": m.precision, "recall": m.recall,
                }))?;
            }
            if let Some(dir) = ckpt_dir {
                if done % self.run.train.checkpoint_every == 0 || done == total {
                    let path = dir.join(format!("step-{done:06}.ckpt"));
                    checkpoint::save(&path, &self.run, &self.store, &self.opt, done)?;
                    emit(log, serde_json::json!({
                        "event": "checkpoint", "step": done, "path": path.display().to_string(),
                    }))?;
                }
            }
        }
        let train_metrics = evaluate(&self.store, &self.run.model, data, self.run.train.batch_size);
        Ok(TrainOutcome { steps: self.step, final_loss: last_loss, train_metrics })
    }
}

/// Forward pass in eval mode (running statistics, no dropout); returns the
/// main-head logits as a plain tensor.
pub fn predict_logits(store: &ParamStore<f32>, cfg: &ModelConfig, images: &Tensor<f32>) -> Tensor<f32> {
    let mut tape = Tape::new(0);
    let x = tape.constant(images.clone());
    let mut fwd = Forward::new(&mut tape, store);
    let out = model_forward(&mut fwd, cfg, x);
    let shape = fwd.tape.shape(out.logits).to_vec();
    Tensor::new(&shape, fwd.tape.data(out.logits).to_vec())
}

/// Macro Dice/IoU and micro precision/recall over a whole split.
pub fn evaluate(store: &ParamStore<f32>, cfg: &ModelConfig, samples: &[Sample], batch_size: usize) -> Metrics {
    let mut acc = MetricsAccum::new();
    for chunk in samples.chunks(batch_size.max(1)) {
        let refs: Vec<&Sample> = chunk.iter().collect();
        let (images, masks) = stack(&refs);
        let logits = predict_logits(store, cfg, &images);
        acc.update(&logits, &masks);
    }
    acc.finish()
}
