//! Shared fixtures for the kernel benchmarks: deterministic inputs and a
//! model configuration small enough to iterate in milliseconds.

use hstmrf::config::ModelConfig;
use hstmrf::{AblationState, Tensor};

/// Deterministic image batch `(b, c, s, s)` with values in `[-0.5, 0.5]`.
pub fn image(b: usize, c: usize, s: usize) -> Tensor<f32> {
    Tensor::from_fn(&[b, c, s, s], |i| ((i as f32) * 0.37).sin() * 0.5)
}

/// Mask batch `(b, 1, s, s)` with a centered foreground square per image.
pub fn mask(b: usize, s: usize) -> Tensor<f32> {
    let (lo, hi) = (s / 4, 3 * s / 4);
    Tensor::from_fn(&[b, 1, s, s], |i| {
        let (row, col) = ((i / s) % s, i % s);
        if (lo..hi).contains(&row) && (lo..hi).contains(&col) {
            1.0
        } else {
            0.0
        }
    })
}

/// Full architecture at half the desk width, sized for 32x32 inputs.
pub fn tiny_model() -> ModelConfig {
    ModelConfig {
        base_channels: 4,
        hidden_dim: 16,
        heads: 4,
        window: 2,
        blocks_per_stage: 2,
        dropout: 0.0,
        pos_bias: false,
        norm_eps: 1e-5,
        ablation: AblationState::Full,
    }
}
