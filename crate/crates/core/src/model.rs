//! Whole-model assembly: parameter initialization and the end-to-end
//! forward pass from an image batch to main + auxiliary logits.

use crate::config::ModelConfig;
use crate::decoder::{decode, init_decoder};
use crate::encoder::{encode, init_encoder};
use crate::params::{Forward, ParamStore};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tape::TensorId;

/// Stream label separating weight initialization from every other consumer
/// of the run seed.
const INIT_STREAM: u64 = 0x696e_6974;

pub use crate::decoder::DecoderOut as ModelOut;

pub fn init_model<T: Scalar>(store: &mut ParamStore<T>, rng: &mut Rng, cfg: &ModelConfig) {
    init_encoder(store, rng, cfg);
    init_decoder(store, rng, cfg);
}

/// Fresh parameter store for `cfg`, drawn from a stream derived from `seed`.
pub fn new_model<T: Scalar>(cfg: &ModelConfig, seed: u64) -> ParamStore<T> {
    let mut store = ParamStore::new();
    let mut rng = Rng::derive(seed, INIT_STREAM);
    init_model(&mut store, &mut rng, cfg);
    store
}

/// Full forward pass on `(B, 3, S, S)`; all three outputs are `(B, 1, S, S)`.
pub fn model_forward<T: Scalar>(fwd: &mut Forward<T>, cfg: &ModelConfig, x: TensorId) -> ModelOut {
    let enc = encode(fwd, cfg, x);
    decode(fwd, cfg, &enc)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::AblationState;
    use crate::tape::Tape;
    use crate::tensor::Tensor;

    fn tiny_cfg(ablation: AblationState) -> ModelConfig {
        ModelConfig {
            base_channels: 2,
            hidden_dim: 8,
            heads: 2,
            window: 2,
            blocks_per_stage: 2,
            dropout: 0.1,
            pos_bias: false,
            norm_eps: 1e-5,
            ablation,
        }
    }

    fn image(b: usize, s: usize) -> Tensor<f64> {
        Tensor::from_fn(&[b, 3, s, s], |i| ((i as f64) * 0.11).sin() * 0.5)
    }

    #[test]
    fn all_variants_run_and_use_every_parameter() {
        for ablation in AblationState::ALL {
            let cfg = tiny_cfg(ablation);
            cfg.validate(32).unwrap();
            let store = new_model::<f64>(&cfg, 42);
            assert!(store.num_trainable() > 0);
            let mut tape = Tape::new(0);
            let mut fwd = Forward::new(&mut tape, &store);
            let x = fwd.tape.constant(image(1, 32));
            let out = model_forward(&mut fwd, &cfg, x);
            for id in [out.logits, out.aux_coarse, out.aux_mid] {
                assert_eq!(fwd.tape.shape(id), &[1, 1, 32, 32], "{ablation:?}");
            }
            let mut used: Vec<&str> = fwd.used_names().iter().map(String::as_str).collect();
            used.sort_unstable();
            let mut all: Vec<&str> = store.names().collect();
            all.sort_unstable();
            assert_eq!(used, all, "unused or phantom params for {ablation:?}");
            assert!(tape.first_nonfinite().is_none(), "{ablation:?}");
        }
    }

    #[test]
    fn each_variant_changes_the_parameter_name_set() {
        let names = |ab: AblationState| -> std::collections::BTreeSet<String> {
            new_model::<f64>(&tiny_cfg(ab), 0).names().map(str::to_string).collect()
        };
        let full = names(AblationState::Full);
        for ab in AblationState::ALL {
            if ab == AblationState::Full {
                continue;
            }
            assert_ne!(names(ab), full, "{ab:?} must not alias the full model");
        }
    }

    #[test]
    fn initialization_is_seed_deterministic_and_seed_sensitive() {
        let cfg = tiny_cfg(AblationState::Full);
        let a = new_model::<f64>(&cfg, 7);
        let b = new_model::<f64>(&cfg, 7);
        let c = new_model::<f64>(&cfg, 8);
        let flat = |s: &ParamStore<f64>| -> Vec<f64> {
            s.iter().flat_map(|(_, t)| t.data().to_vec()).collect()
        };
        assert_eq!(flat(&a), flat(&b));
        assert_ne!(flat(&a), flat(&c));
    }

    #[test]
    fn gradients_span_encoder_and_decoder() {
        let cfg = tiny_cfg(AblationState::Full);
        let store = new_model::<f64>(&cfg, 3);
        let mut tape = Tape::new(9);
        tape.set_train(true);
        let mut fwd = Forward::new(&mut tape, &store);
        let x = fwd.tape.constant(image(2, 32));
        let out = model_forward(&mut fwd, &cfg, x);
        let l0 = fwd.tape.sum(out.logits);
        let l1 = fwd.tape.sum(out.aux_coarse);
        let l2 = fwd.tape.sum(out.aux_mid);
        let l = fwd.tape.add(l0, l1);
        let loss = fwd.tape.add(l, l2);
        fwd.tape.backward(loss);
        let grads: std::collections::HashMap<_, _> = fwd.collect_grads().into_iter().collect();
        for name in [
            "enc.stem.br1.conv.w",
            "enc.stem.br2.bn.beta",
            "enc.s4.b1.hmsa.br1.q.w",
            "enc.s5.b0.mlp.br2.fc2.w",
            "dec.fuse1.c1.conv.w",
            "dec.sca5.fc2.w",
            "dec.head.conv.w",
            "dec.aux1.conv.w",
            "dec.aux3.conv.w",
        ] {
            assert!(
                grads[name].iter().any(|v| v.abs() > 1e-12),
                "no gradient reached {name}"
            );
        }
    }
}
