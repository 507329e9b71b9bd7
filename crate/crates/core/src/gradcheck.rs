//! Finite-difference verification of tape gradients.
//!
//! A check rebuilds the same computation on a fresh tape (seeded identically,
//! so dropout masks replay) with one input element nudged by ±h, and compares
//! the central difference `(f(x+h) - f(x-h)) / 2h` against the analytic
//! gradient from `backward`. Inputs too large to sweep exhaustively are
//! sampled at deterministic element positions.

use crate::rng::Rng;
use crate::tape::{Tape, TensorId};
use crate::tensor::Tensor;

/// Outcome of one named check.
#[derive(Clone, Debug)]
pub struct GradcheckReport {
    pub name: String,
    /// Worst relative error over all compared elements.
    pub max_rel_err: f64,
    pub tol: f64,
    pub elements_checked: usize,
    pub pass: bool,
}

impl GradcheckReport {
    pub fn line(&self) -> String {
        format!(
            "{} {:<40} max_rel_err {:>12.3e}  tol {:>8.1e}  ({} elements)",
            if self.pass { "PASS" } else { "FAIL" },
            self.name,
            self.max_rel_err,
            self.tol,
            self.elements_checked
        )
    }
}

/// Relative error with an absolute floor so near-zero gradients compare
/// sanely: `|a-b| / max(|a|, |b|, floor)`.
pub fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// Settings for one finite-difference run.
#[derive(Clone, Copy, Debug)]
pub struct GradcheckCfg {
    pub step: f64,
    pub tol: f64,
    /// Comparison floor for tiny gradients.
    pub floor: f64,
    /// Check at most this many elements per input (deterministically
    /// sampled); `usize::MAX` sweeps everything.
    pub max_elements_per_input: usize,
    /// Seed for both the tape (dropout replay) and element sampling.
    pub seed: u64,
}

impl Default for GradcheckCfg {
    fn default() -> Self {
        GradcheckCfg { step: 1e-4, tol: 1e-4, floor: 1e-5, max_elements_per_input: usize::MAX, seed: 0 }
    }
}

/// Check `d loss / d inputs` for a closure that rebuilds the computation
/// from leaves each call. The closure must be deterministic given the tape
/// (all stochastic ops draw from the tape's generator).
pub fn gradcheck(
    name: &str,
    inputs: &[Tensor<f64>],
    cfg: GradcheckCfg,
    build: impl Fn(&mut Tape<f64>, &[TensorId]) -> TensorId,
) -> GradcheckReport {
    // Analytic pass.
    let mut tape = Tape::<f64>::new(cfg.seed);
    tape.set_train(true);
    let ids: Vec<TensorId> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let loss = build(&mut tape, &ids);
    assert!(
        tape.first_nonfinite().is_none(),
        "gradcheck `{name}`: forward produced a non-finite value in op `{}`",
        tape.first_nonfinite().map(|nf| nf.op).unwrap_or("?")
    );
    tape.backward(loss);
    let analytic: Vec<Vec<f64>> = ids
        .iter()
        .map(|&id| tape.grad(id).map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; tape.numel(id)]))
        .collect();

    let eval = |nudged: &[Tensor<f64>]| -> f64 {
        let mut t = Tape::<f64>::new(cfg.seed);
        t.set_train(true);
        let ids: Vec<TensorId> = nudged.iter().map(|x| t.leaf(x.clone(), true)).collect();
        let l = build(&mut t, &ids);
        t.data(l)[0]
    };

    let mut sampler = Rng::derive(cfg.seed, 0x6772_6463); // element-picking stream, disjoint from the tape's
    let mut max_rel = 0.0_f64;
    let mut checked = 0usize;
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for (which, input) in inputs.iter().enumerate() {
        let n = input.numel();
        let elements: Vec<usize> = if n <= cfg.max_elements_per_input {
            (0..n).collect()
        } else {
            // Sample without replacement.
            let mut all: Vec<usize> = (0..n).collect();
            sampler.shuffle(&mut all);
            all.truncate(cfg.max_elements_per_input);
            all
        };
        for &e in &elements {
            let orig = input.data()[e];
            work[which].data_mut()[e] = orig + cfg.step;
            let up = eval(&work);
            work[which].data_mut()[e] = orig - cfg.step;
            let down = eval(&work);
            work[which].data_mut()[e] = orig;
            let numeric = (up - down) / (2.0 * cfg.step);
            max_rel = max_rel.max(rel_err(analytic[which][e], numeric, cfg.floor));
            checked += 1;
        }
    }
    GradcheckReport {
        name: name.to_string(),
        max_rel_err: max_rel,
        tol: cfg.tol,
        elements_checked: checked,
        pass: max_rel < cfg.tol,
    }
}

/// Scope selector for the canned verification suites.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CheckScope {
    Ops,
    Blocks,
    Model,
    All,
}

impl CheckScope {
    pub fn parse(s: &str) -> Option<CheckScope> {
        match s {
            "op" | "ops" => Some(CheckScope::Ops),
            "block" | "blocks" => Some(CheckScope::Blocks),
            "model" => Some(CheckScope::Model),
            "all" => Some(CheckScope::All),
            _ => None,
        }
    }
}

/// Run the selected suites. Reports are independent; a failure does not
/// stop the remaining checks.
pub fn run_suite(scope: CheckScope, seed: u64) -> Vec<GradcheckReport> {
    let mut out = Vec::new();
    if matches!(scope, CheckScope::Ops | CheckScope::All) {
        out.extend(op_suite(seed));
    }
    if matches!(scope, CheckScope::Blocks | CheckScope::All) {
        out.extend(block_suite(seed));
    }
    if matches!(scope, CheckScope::Model | CheckScope::All) {
        out.extend(model_suite(seed));
    }
    out
}

fn rand_t(rng: &mut Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.uniform(lo, hi))
}

/// Pattern-weighted sum. A plain sum would hide permutation and
/// normalization gradients behind a constant total.
fn weighted_sum(tape: &mut Tape<f64>, x: TensorId) -> TensorId {
    let shape = tape.shape(x).to_vec();
    let pat = tape.constant(Tensor::from_fn(&shape, |i| (i as f64 * 0.7).sin() + 0.2));
    let y = tape.mul(x, pat);
    tape.sum(y)
}

/// Every differentiable tape op against central differences, on small
/// random instances with kinks and ties kept away from the probe step.
pub fn op_suite(seed: u64) -> Vec<GradcheckReport> {
    let cfg = GradcheckCfg { seed, max_elements_per_input: 24, ..GradcheckCfg::default() };
    let mut rng = Rng::derive(seed, 0x6f70_7375);
    let mut out = Vec::new();

    let a = rand_t(&mut rng, &[2, 3, 4, 4], -1.0, 1.0);
    let b = rand_t(&mut rng, &[2, 3, 4, 4], -1.0, 1.0);
    out.push(gradcheck("op/add", &[a.clone(), b.clone()], cfg, |t, ids| {
        let y = t.add(ids[0], ids[1]);
        weighted_sum(t, y)
    }));
    out.push(gradcheck("op/sub_then_mul", &[a.clone(), b], cfg, |t, ids| {
        let d = t.sub(ids[0], ids[1]);
        let y = t.mul(d, ids[0]);
        weighted_sum(t, y)
    }));
    let denom = rand_t(&mut rng, &[2, 3, 4, 4], 0.5, 2.0);
    out.push(gradcheck("op/div", &[a.clone(), denom], cfg, |t, ids| {
        let y = t.div(ids[0], ids[1]);
        weighted_sum(t, y)
    }));
    let gate = rand_t(&mut rng, &[2, 3, 1, 1], 0.2, 0.8);
    out.push(gradcheck("op/mul_broadcast_gate", &[a.clone(), gate], cfg, |t, ids| {
        let y = t.mul(ids[0], ids[1]);
        weighted_sum(t, y)
    }));
    out.push(gradcheck("op/scalar_affine", &[a.clone()], cfg, |t, ids| {
        let y = t.mul_scalar(ids[0], 1.7);
        let y = t.add_scalar(y, -0.3);
        weighted_sum(t, y)
    }));

    let ma = rand_t(&mut rng, &[3, 4], -1.0, 1.0);
    let mb = rand_t(&mut rng, &[4, 5], -1.0, 1.0);
    out.push(gradcheck("op/matmul", &[ma, mb.clone()], cfg, |t, ids| {
        let y = t.matmul(ids[0], ids[1]);
        weighted_sum(t, y)
    }));
    let ba = rand_t(&mut rng, &[2, 3, 4], -1.0, 1.0);
    out.push(gradcheck("op/matmul_shared_rhs", &[ba.clone(), mb], cfg, |t, ids| {
        let y = t.matmul(ids[0], ids[1]);
        weighted_sum(t, y)
    }));
    let bb = rand_t(&mut rng, &[2, 4, 3], -1.0, 1.0);
    out.push(gradcheck("op/matmul_batched_rhs", &[ba, bb], cfg, |t, ids| {
        let y = t.matmul(ids[0], ids[1]);
        weighted_sum(t, y)
    }));

    let cx = rand_t(&mut rng, &[2, 3, 5, 5], -1.0, 1.0);
    let cw = rand_t(&mut rng, &[4, 3, 3, 3], -0.5, 0.5);
    let cb = rand_t(&mut rng, &[4], -0.2, 0.2);
    out.push(gradcheck("op/conv2d_same", &[cx.clone(), cw.clone(), cb.clone()], cfg, |t, ids| {
        let y = t.conv2d(ids[0], ids[1], Some(ids[2]), 1, 1, 1);
        weighted_sum(t, y)
    }));
    out.push(gradcheck("op/conv2d_strided_dilated", &[cx.clone(), cw, cb], cfg, |t, ids| {
        let y = t.conv2d(ids[0], ids[1], Some(ids[2]), 2, 2, 2);
        weighted_sum(t, y)
    }));
    out.push(gradcheck("op/softpool2d", &[rand_t(&mut rng, &[2, 2, 4, 4], -1.5, 1.5)], cfg, |t, ids| {
        let y = t.softpool2d(ids[0], 2, 2);
        weighted_sum(t, y)
    }));
    // Distinct values keep the max selection stable under the probe step.
    let mx = Tensor::from_fn(&[3, 7], |i| (i * 37 % 101) as f64 * 0.013);
    out.push(gradcheck("op/max_last", &[mx], cfg, |t, ids| {
        let y = t.max_last(ids[0]);
        weighted_sum(t, y)
    }));

    out.push(gradcheck("op/softmax", &[rand_t(&mut rng, &[2, 3, 6], -2.0, 2.0)], cfg, |t, ids| {
        let y = t.softmax(ids[0], 2);
        weighted_sum(t, y)
    }));
    // ReLU inputs sit at least 0.05 from the kink.
    let rx = Tensor::from_fn(&[4, 7], |i| ((i % 7) as f64 - 3.0) * 0.3 + 0.05);
    out.push(gradcheck("op/relu", &[rx], cfg, |t, ids| {
        let y = t.relu(ids[0]);
        weighted_sum(t, y)
    }));
    out.push(gradcheck("op/gelu", &[rand_t(&mut rng, &[3, 5], -2.0, 2.0)], cfg, |t, ids| {
        let y = t.gelu(ids[0]);
        weighted_sum(t, y)
    }));
    out.push(gradcheck("op/sigmoid", &[rand_t(&mut rng, &[3, 5], -3.0, 3.0)], cfg, |t, ids| {
        let y = t.sigmoid(ids[0]);
        weighted_sum(t, y)
    }));
    out.push(gradcheck("op/softplus", &[rand_t(&mut rng, &[3, 5], -3.0, 3.0)], cfg, |t, ids| {
        let y = t.softplus(ids[0]);
        weighted_sum(t, y)
    }));
    out.push(gradcheck("op/dropout", &[rand_t(&mut rng, &[4, 8], 0.1, 1.0)], cfg, |t, ids| {
        let y = t.dropout(ids[0], 0.3);
        let y = t.mul(y, y);
        weighted_sum(t, y)
    }));

    let nx = rand_t(&mut rng, &[3, 2, 4, 4], -1.0, 1.0);
    let ngamma = rand_t(&mut rng, &[2], 0.8, 1.2);
    let nbeta = rand_t(&mut rng, &[2], -0.2, 0.2);
    out.push(gradcheck("op/batch_norm_train", &[nx, ngamma, nbeta], cfg, |t, ids| {
        let (y, _, _) = t.batch_norm(ids[0], ids[1], ids[2], None, 1e-5);
        weighted_sum(t, y)
    }));
    let lx = rand_t(&mut rng, &[2, 5, 8], -1.0, 1.0);
    let lgamma = rand_t(&mut rng, &[8], 0.8, 1.2);
    let lbeta = rand_t(&mut rng, &[8], -0.2, 0.2);
    out.push(gradcheck("op/layer_norm", &[lx, lgamma, lbeta], cfg, |t, ids| {
        let y = t.layer_norm(ids[0], ids[1], ids[2], 1e-5);
        weighted_sum(t, y)
    }));

    out.push(gradcheck("op/bilinear_up", &[rand_t(&mut rng, &[1, 2, 3, 3], -1.0, 1.0)], cfg, |t, ids| {
        let y = t.bilinear(ids[0], 6, 5);
        weighted_sum(t, y)
    }));
    out.push(gradcheck("op/bilinear_down", &[rand_t(&mut rng, &[1, 2, 4, 4], -1.0, 1.0)], cfg, |t, ids| {
        let y = t.bilinear(ids[0], 2, 2);
        weighted_sum(t, y)
    }));
    out.push(gradcheck("op/gather_rows_repeated", &[rand_t(&mut rng, &[7, 4], -1.0, 1.0)], cfg, |t, ids| {
        let y = t.gather_rows(ids[0], &[0, 3, 3, 6, 1]);
        weighted_sum(t, y)
    }));
    out.push(gradcheck("op/roll", &[rand_t(&mut rng, &[3, 4, 5], -1.0, 1.0)], cfg, |t, ids| {
        let y = t.roll(ids[0], &[1, -2, 0]);
        weighted_sum(t, y)
    }));
    let ca = rand_t(&mut rng, &[2, 2, 3], -1.0, 1.0);
    let cb2 = rand_t(&mut rng, &[2, 4, 3], -1.0, 1.0);
    out.push(gradcheck("op/concat", &[ca, cb2], cfg, |t, ids| {
        let y = t.concat(&[ids[0], ids[1]], 1);
        weighted_sum(t, y)
    }));
    out.push(gradcheck("op/permute_reshape", &[rand_t(&mut rng, &[2, 3, 4], -1.0, 1.0)], cfg, |t, ids| {
        let y = t.permute(ids[0], &[2, 0, 1]);
        let y = t.reshape(y, &[4, 6]);
        weighted_sum(t, y)
    }));
    out.push(gradcheck("op/sum_last_mean", &[rand_t(&mut rng, &[3, 4, 5], -1.0, 1.0)], cfg, |t, ids| {
        let y = t.sum_last(ids[0]);
        let y = t.mul(y, y);
        t.mean(y)
    }));
    out
}

/// Composite layers with parameters bound through [`Forward`], checked
/// against both their data inputs and selected weights.
pub fn block_suite(seed: u64) -> Vec<GradcheckReport> {
    use crate::attention::{
        init_coupled_attention, init_single_attention, shift_mask, window_partition, window_reverse, AttnSpec,
    };
    use crate::layers;
    use crate::params::{Forward, ParamStore};

    let cfg = GradcheckCfg { seed, max_elements_per_input: 12, ..GradcheckCfg::default() };
    let mut rng = Rng::derive(seed, 0x626c_6b73);
    let mut out = Vec::new();

    // Coupled dual-branch window attention, unshifted and shifted+masked.
    let spec = AttnSpec { ch: 6, hidden: 8, heads: 2 };
    let mut store = ParamStore::<f64>::new();
    let mut init_rng = Rng::derive(seed, 1);
    init_coupled_attention(&mut store, &mut init_rng, "attn", spec, true, 2);
    let x1 = rand_t(&mut rng, &[1, 4, 4, 6], -1.0, 1.0);
    let x2 = rand_t(&mut rng, &[1, 4, 4, 6], -1.0, 1.0);
    let qw = store.get("attn.br1.q.w").clone();
    {
        let store = store.clone();
        out.push(gradcheck("block/coupled_attention", &[x1.clone(), x2.clone(), qw.clone()], cfg, move |t, ids| {
            let mut fwd = Forward::new(t, &store);
            fwd.bind_override("attn.br1.q.w", ids[2]);
            let (w1, wins) = window_partition(fwd.tape, ids[0], 2);
            let (w2, _) = window_partition(fwd.tape, ids[1], 2);
            let o = crate::attention::coupled_window_attention(&mut fwd, "attn", w1, w2, wins, spec, None);
            let z1 = window_reverse(fwd.tape, o.z1, 2, 1, 4, 4);
            let z2 = window_reverse(fwd.tape, o.z2, 2, 1, 4, 4);
            let z = fwd.tape.add(z1, z2);
            weighted_sum(fwd.tape, z)
        }));
    }
    {
        let store = store.clone();
        let mask = shift_mask::<f64>(4, 4, 2, 1);
        out.push(gradcheck("block/coupled_attention_shift_masked", &[x1.clone(), x2], cfg, move |t, ids| {
            let mut fwd = Forward::new(t, &store);
            let s1 = fwd.tape.roll(ids[0], &[0, -1, -1, 0]);
            let s2 = fwd.tape.roll(ids[1], &[0, -1, -1, 0]);
            let (w1, wins) = window_partition(fwd.tape, s1, 2);
            let (w2, _) = window_partition(fwd.tape, s2, 2);
            let o = crate::attention::coupled_window_attention(&mut fwd, "attn", w1, w2, wins, spec, Some(&mask));
            let z = fwd.tape.add(o.z1, o.z2);
            weighted_sum(fwd.tape, z)
        }));
    }

    // Single-branch (decoupled) window attention.
    let mut sstore = ParamStore::<f64>::new();
    init_single_attention(&mut sstore, &mut init_rng, "msa", "br1", spec, false, 2);
    out.push(gradcheck("block/single_attention", &[x1], cfg, move |t, ids| {
        let mut fwd = Forward::new(t, &sstore);
        let (w1, wins) = window_partition(fwd.tape, ids[0], 2);
        let (z, _) = crate::attention::single_window_attention(&mut fwd, "msa", "br1", w1, wins, spec, None);
        weighted_sum(fwd.tape, z)
    }));

    // Conv-BN-ReLU x2 in train mode, against input, a kernel, and a BN gain.
    let mut dstore = ParamStore::<f64>::new();
    init_rng = Rng::derive(seed, 2);
    layers::init_double_conv(&mut dstore, &mut init_rng, "dc", 3, 4);
    let dx = rand_t(&mut rng, &[2, 3, 6, 6], -1.0, 1.0);
    let dw = dstore.get("dc.c1.conv.w").clone();
    let dg = dstore.get("dc.c2.bn.gamma").clone();
    out.push(gradcheck("block/double_conv", &[dx, dw, dg], cfg, move |t, ids| {
        let mut fwd = Forward::new(t, &dstore);
        fwd.bind_override("dc.c1.conv.w", ids[1]);
        fwd.bind_override("dc.c2.bn.gamma", ids[2]);
        let y = layers::double_conv(&mut fwd, "dc", ids[0]);
        weighted_sum(fwd.tape, y)
    }));

    // Token MLP (fc -> GELU -> fc).
    let mut mstore = ParamStore::<f64>::new();
    init_rng = Rng::derive(seed, 3);
    layers::init_token_mlp(&mut mstore, &mut init_rng, "mlp", 6);
    let mx = rand_t(&mut rng, &[2, 5, 6], -1.0, 1.0);
    let mw = mstore.get("mlp.fc1.w").clone();
    out.push(gradcheck("block/token_mlp", &[mx, mw], cfg, move |t, ids| {
        let mut fwd = Forward::new(t, &mstore);
        fwd.bind_override("mlp.fc1.w", ids[1]);
        let y = layers::token_mlp(&mut fwd, "mlp", ids[0]);
        weighted_sum(fwd.tape, y)
    }));

    // The composite segmentation objective against predicted logits.
    let mask = Tensor::from_fn(&[2, 1, 6, 6], |i| if (i / 3) % 2 == 0 { 1.0 } else { 0.0 });
    let logits = rand_t(&mut rng, &[2, 1, 6, 6], -2.0, 2.0);
    let loss_cfg = crate::config::LossConfig::default();
    out.push(gradcheck("block/stage_loss", &[logits], cfg, move |t, ids| {
        crate::losses::stage_loss(t, &loss_cfg, ids[0], &mask)
    }));
    out
}

/// End-to-end checks: full composite loss through the whole network,
/// differentiated against the input image and parameters at both ends of
/// the graph, for the reference model and the variants that change the
/// attention and branch wiring.
pub fn model_suite(seed: u64) -> Vec<GradcheckReport> {
    use crate::config::{AblationState, LossConfig, ModelConfig};
    use crate::losses::total_loss;
    use crate::model::{model_forward, new_model};
    use crate::params::Forward;

    // A smaller probe step keeps finite differences from straddling ReLU
    // kinks deep in the network; f64 roundoff still leaves ~6 clean digits.
    let cfg = GradcheckCfg { seed, step: 1e-5, tol: 1e-3, max_elements_per_input: 4, ..GradcheckCfg::default() };
    let mut rng = Rng::derive(seed, 0x6d64_6c73);
    let mut out = Vec::new();
    let image = rand_t(&mut rng, &[1, 3, 32, 32], 0.05, 0.95);
    let mask = Tensor::from_fn(&[1, 1, 32, 32], |i| {
        let (y, x) = ((i / 32) as f64, (i % 32) as f64);
        if (y - 16.0).powi(2) + (x - 16.0).powi(2) < 81.0 { 1.0 } else { 0.0 }
    });

    for ablation in [AblationState::Full, AblationState::NoHst, AblationState::OneRf] {
        let model_cfg = ModelConfig {
            base_channels: 2,
            hidden_dim: 8,
            heads: 2,
            window: 2,
            blocks_per_stage: 2,
            dropout: 0.1,
            pos_bias: false,
            norm_eps: 1e-5,
            ablation,
        };
        let store = new_model::<f64>(&model_cfg, 11);
        let stem = store.get("enc.stem.br1.conv.w").clone();
        let head = store.get("dec.head.conv.w").clone();
        let loss_cfg = LossConfig::default();
        let mask = mask.clone();
        out.push(gradcheck(
            &format!("model/{}", ablation.name()),
            &[image.clone(), stem, head],
            cfg,
            move |t, ids| {
                let mut fwd = Forward::new(t, &store);
                fwd.bind_override("enc.stem.br1.conv.w", ids[1]);
                fwd.bind_override("dec.head.conv.w", ids[2]);
                let mo = model_forward(&mut fwd, &model_cfg, ids[0]);
                total_loss(&mut fwd, &loss_cfg, &mo, &mask)
            },
        ));
    }
    out
}
