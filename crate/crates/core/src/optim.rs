//! AdamW with decoupled weight decay, global-norm gradient clipping, and a
//! linear-warmup cosine learning-rate schedule.

use indexmap::IndexMap;

use crate::params::ParamStore;
use crate::scalar::Scalar;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Learning rate for `step` (0-based) out of `total`: linear ramp to
/// `lr_max` over `warmup` steps (first step already nonzero), then cosine
/// decay to `lr_min` at `step == total`.
pub fn lr_at(step: u64, total: u64, warmup: u64, lr_max: f64, lr_min: f64) -> f64 {
    if warmup > 0 && step < warmup {
        return lr_max * (step + 1) as f64 / warmup as f64;
    }
    let span = (total.saturating_sub(warmup)).max(1) as f64;
    let progress = ((step - warmup) as f64 / span).min(1.0);
    lr_min + 0.5 * (lr_max - lr_min) * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// First- and second-moment state per parameter, lazily created.
pub struct AdamW<T: Scalar> {
    pub weight_decay: f64,
    pub step: u64,
    pub m: IndexMap<String, Vec<T>>,
    pub v: IndexMap<String, Vec<T>>,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(weight_decay: f64) -> Self {
        AdamW { weight_decay, step: 0, m: IndexMap::new(), v: IndexMap::new() }
    }

    /// Apply one update from `(name, grad)` pairs. Clipping rescales all
    /// gradients together when their global L2 norm exceeds `clip`.
    pub fn apply(
        &mut self,
        store: &mut ParamStore<T>,
        grads: &[(String, Vec<T>)],
        lr: f64,
        clip: Option<f64>,
    ) {
        let mut scale = 1.0f64;
        if let Some(c) = clip {
            let sq: f64 = grads
                .iter()
                .flat_map(|(_, g)| g.iter())
                .map(|&v| {
                    let x = v.to_f64();
                    x * x
                })
                .sum();
            let norm = sq.sqrt();
            if norm > c {
                scale = c / norm;
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - BETA1.powi(t);
        let bc2 = 1.0 - BETA2.powi(t);
        for (name, grad) in grads {
            let n = grad.len();
            let m = self.m.entry(name.clone()).or_insert_with(|| vec![T::zero(); n]);
            let v = self.v.entry(name.clone()).or_insert_with(|| vec![T::zero(); n]);
            assert_eq!(m.len(), n, "gradient size changed for {name}");
            let theta = store.get_mut(name);
            assert_eq!(theta.numel(), n, "parameter/gradient size mismatch for {name}");
            for i in 0..n {
                let g = grad[i].to_f64() * scale;
                let mi = BETA1 * m[i].to_f64() + (1.0 - BETA1) * g;
                let vi = BETA2 * v[i].to_f64() + (1.0 - BETA2) * g * g;
                m[i] = T::lit(mi);
                v[i] = T::lit(vi);
                let mhat = mi / bc1;
                let vhat = vi / bc2;
                let p = theta.data()[i].to_f64();
                let upd = p - lr * (mhat / (vhat.sqrt() + ADAM_EPS)) - lr * self.weight_decay * p;
                theta.data_mut()[i] = T::lit(upd);
            }
        }
    }
}
