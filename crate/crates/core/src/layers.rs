//! Reusable layers. Each layer is a pair of functions sharing one name
//! scheme: `init_*` registers parameters into a [`ParamStore`] and the
//! forward function binds those same names onto a tape, so a mismatch
//! between what was created and what is used panics by construction.
//!
//! Initialization draws in f64 from the caller's generator and converts
//! once, so f32 and f64 stores built from the same seed hold the same values
//! up to rounding.

use crate::params::{Forward, ParamStore, StatsUpdate};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tape::TensorId;
use crate::tensor::Tensor;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

fn draw<T: Scalar>(shape: &[usize], rng: &mut Rng, mut f: impl FnMut(&mut Rng) -> f64) -> Tensor<T> {
    Tensor::from_fn(shape, |_| T::lit(f(rng)))
}

/// Fully connected `(.., din) -> (.., dout)`; weights are truncated-normal
/// (std 0.02), biases zero.
pub fn init_linear<T: Scalar>(
    store: &mut ParamStore<T>,
    rng: &mut Rng,
    prefix: &str,
    din: usize,
    dout: usize,
    bias: bool,
) {
    store.insert_param(&format!("{prefix}.w"), draw(&[din, dout], rng, |r| r.trunc_normal(0.02)));
    if bias {
        store.insert_param(&format!("{prefix}.b"), Tensor::zeros(&[dout]));
    }
}

pub fn linear<T: Scalar>(fwd: &mut Forward<T>, prefix: &str, x: TensorId) -> TensorId {
    let w = fwd.param(&format!("{prefix}.w"));
    let y = fwd.tape.matmul(x, w);
    let bias_name = format!("{prefix}.b");
    if fwd.params.contains(&bias_name) {
        let b = fwd.param(&bias_name);
        fwd.tape.add(y, b)
    } else {
        y
    }
}

/// Square-kernel convolution; fan-aware uniform init `U(±1/sqrt(cin*k*k))`.
/// Convolutions feeding a batch norm take `bias: false` — the mean
/// subtraction cancels a bias exactly, leaving it gradient-free.
pub fn init_conv<T: Scalar>(
    store: &mut ParamStore<T>,
    rng: &mut Rng,
    prefix: &str,
    cin: usize,
    cout: usize,
    k: usize,
    bias: bool,
) {
    let bound = 1.0 / ((cin * k * k) as f64).sqrt();
    store.insert_param(&format!("{prefix}.w"), draw(&[cout, cin, k, k], rng, |r| r.uniform(-bound, bound)));
    if bias {
        store.insert_param(&format!("{prefix}.b"), draw(&[cout], rng, |r| r.uniform(-bound, bound)));
    }
}

pub fn conv<T: Scalar>(
    fwd: &mut Forward<T>,
    prefix: &str,
    x: TensorId,
    stride: usize,
    dilation: usize,
    pad: usize,
) -> TensorId {
    let w = fwd.param(&format!("{prefix}.w"));
    let bias_name = format!("{prefix}.b");
    let b = fwd.params.contains(&bias_name).then(|| fwd.param(&bias_name));
    fwd.tape.conv2d(x, w, b, stride, dilation, pad)
}

pub fn init_batch_norm<T: Scalar>(store: &mut ParamStore<T>, prefix: &str, c: usize) {
    store.insert_param(&format!("{prefix}.gamma"), Tensor::full(&[c], T::one()));
    store.insert_param(&format!("{prefix}.beta"), Tensor::zeros(&[c]));
    store.insert_buffer(&format!("{prefix}.run_mean"), Tensor::zeros(&[c]));
    store.insert_buffer(&format!("{prefix}.run_var"), Tensor::full(&[c], T::one()));
}

/// Batch normalization that reads batch statistics in train mode (queueing a
/// running-average update for after the step) and running statistics in eval
/// mode.
pub fn batch_norm<T: Scalar>(fwd: &mut Forward<T>, prefix: &str, x: TensorId) -> TensorId {
    let gamma = fwd.param(&format!("{prefix}.gamma"));
    let beta = fwd.param(&format!("{prefix}.beta"));
    let shape = fwd.tape.shape(x).to_vec();
    let count = shape[0] * shape[2] * shape[3];
    if fwd.train() {
        let (y, mean, var) = fwd.tape.batch_norm(x, gamma, beta, None, BN_EPS);
        fwd.stats_updates.push(StatsUpdate { prefix: prefix.to_string(), mean, var, count });
        y
    } else {
        let mean = fwd.buffer_data(&format!("{prefix}.run_mean")).to_vec();
        let var = fwd.buffer_data(&format!("{prefix}.run_var")).to_vec();
        let (y, _, _) = fwd.tape.batch_norm(x, gamma, beta, Some((&mean, &var)), BN_EPS);
        y
    }
}

/// Fold queued batch statistics into the running buffers:
/// `run = (1-m)*run + m*batch`, with the variance unbiased by `n/(n-1)`.
pub fn apply_stats_updates<T: Scalar>(store: &mut ParamStore<T>, updates: &[StatsUpdate<T>]) {
    let m = T::lit(BN_MOMENTUM);
    let keep = T::one() - m;
    for u in updates {
        let unbias = if u.count > 1 { T::lit(u.count as f64 / (u.count as f64 - 1.0)) } else { T::one() };
        let rm = store.get_mut(&format!("{}.run_mean", u.prefix));
        for (slot, &b) in rm.data_mut().iter_mut().zip(&u.mean) {
            *slot = keep * *slot + m * b;
        }
        let rv = store.get_mut(&format!("{}.run_var", u.prefix));
        for (slot, &b) in rv.data_mut().iter_mut().zip(&u.var) {
            *slot = keep * *slot + m * b * unbias;
        }
    }
}

pub fn init_layer_norm<T: Scalar>(store: &mut ParamStore<T>, prefix: &str, dim: usize) {
    store.insert_param(&format!("{prefix}.gamma"), Tensor::full(&[dim], T::one()));
    store.insert_param(&format!("{prefix}.beta"), Tensor::zeros(&[dim]));
}

pub fn layer_norm<T: Scalar>(fwd: &mut Forward<T>, prefix: &str, x: TensorId, eps: f64) -> TensorId {
    let gamma = fwd.param(&format!("{prefix}.gamma"));
    let beta = fwd.param(&format!("{prefix}.beta"));
    fwd.tape.layer_norm(x, gamma, beta, eps)
}

/// Conv(3x3, same) -> BN -> ReLU with a shared prefix.
pub fn init_conv_bn_relu<T: Scalar>(
    store: &mut ParamStore<T>,
    rng: &mut Rng,
    prefix: &str,
    cin: usize,
    cout: usize,
    k: usize,
) {
    init_conv(store, rng, &format!("{prefix}.conv"), cin, cout, k, false);
    init_batch_norm(store, &format!("{prefix}.bn"), cout);
}

pub fn conv_bn_relu<T: Scalar>(
    fwd: &mut Forward<T>,
    prefix: &str,
    x: TensorId,
    stride: usize,
    dilation: usize,
    pad: usize,
) -> TensorId {
    let y = conv(fwd, &format!("{prefix}.conv"), x, stride, dilation, pad);
    let y = batch_norm(fwd, &format!("{prefix}.bn"), y);
    fwd.tape.relu(y)
}

/// Two stacked same-padding 3x3 Conv-BN-ReLU blocks (`.c1`, `.c2`), the
/// decoder's fusion workhorse.
pub fn init_double_conv<T: Scalar>(
    store: &mut ParamStore<T>,
    rng: &mut Rng,
    prefix: &str,
    cin: usize,
    cout: usize,
) {
    init_conv_bn_relu(store, rng, &format!("{prefix}.c1"), cin, cout, 3);
    init_conv_bn_relu(store, rng, &format!("{prefix}.c2"), cout, cout, 3);
}

pub fn double_conv<T: Scalar>(fwd: &mut Forward<T>, prefix: &str, x: TensorId) -> TensorId {
    let y = conv_bn_relu(fwd, &format!("{prefix}.c1"), x, 1, 1, 1);
    conv_bn_relu(fwd, &format!("{prefix}.c2"), y, 1, 1, 1)
}

/// Transformer feed-forward: fc1 -> GELU -> fc2 with expansion ratio 4.
pub fn init_token_mlp<T: Scalar>(store: &mut ParamStore<T>, rng: &mut Rng, prefix: &str, dim: usize) {
    init_linear(store, rng, &format!("{prefix}.fc1"), dim, 4 * dim, true);
    init_linear(store, rng, &format!("{prefix}.fc2"), 4 * dim, dim, true);
}

pub fn token_mlp<T: Scalar>(fwd: &mut Forward<T>, prefix: &str, x: TensorId) -> TensorId {
    let h = linear(fwd, &format!("{prefix}.fc1"), x);
    let h = fwd.tape.gelu(h);
    linear(fwd, &format!("{prefix}.fc2"), h)
}
