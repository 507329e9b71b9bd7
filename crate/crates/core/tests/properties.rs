//! Randomized property tests for the library's structural invariants:
//! lossless image round trips, binary-mask preservation, window round
//! trips, loss equivalences, metric formulas, and schedule bounds.

use proptest::prelude::*;

use hstmrf::attention::{window_partition, window_reverse};
use hstmrf::data::{augment, load_sample, parse_manifest, Sample, Split};
use hstmrf::losses::tversky;
use hstmrf::metrics::MetricsAccum;
use hstmrf::optim::lr_at;
use hstmrf::pnm::{read_pnm, write_pgm, write_ppm};
use hstmrf::tape::Tape;
use hstmrf::tensor::Tensor;

fn tmpdir(tag: &str) -> std::path::PathBuf {
    let d = std::env::temp_dir().join(format!("hstmrf-prop-{tag}-{}", std::process::id()));
    std::fs::create_dir_all(&d).unwrap();
    d
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn pgm_round_trip_is_lossless(
        w in 1usize..=12,
        h in 1usize..=12,
        seed in any::<u64>(),
    ) {
        let data: Vec<u8> = (0..w * h).map(|i| (seed.wrapping_mul(i as u64 + 1) >> 16) as u8).collect();
        let path = tmpdir("pgm").join("x.pgm");
        write_pgm(&path, w, h, &data).unwrap();
        let back = read_pnm(&path).unwrap();
        prop_assert_eq!((back.width, back.height, back.channels, back.maxval), (w, h, 1, 255));
        prop_assert_eq!(back.data, data);
    }

    #[test]
    fn ppm_round_trip_is_lossless(
        w in 1usize..=10,
        h in 1usize..=10,
        seed in any::<u64>(),
    ) {
        let data: Vec<u8> = (0..3 * w * h).map(|i| (seed.wrapping_mul(i as u64 + 7) >> 24) as u8).collect();
        let path = tmpdir("ppm").join("x.ppm");
        write_ppm(&path, w, h, &data).unwrap();
        let back = read_pnm(&path).unwrap();
        prop_assert_eq!((back.width, back.height, back.channels), (w, h, 3));
        prop_assert_eq!(back.data, data);
    }

    #[test]
    fn constant_images_resize_to_constant_planes(
        value in 0u8..=255,
        w in 4usize..=12,
        h in 4usize..=12,
        target_pow in 4usize..=5,
    ) {
        let target = 1 << target_pow;
        let dir = tmpdir("const");
        let img = dir.join("c.pgm");
        let msk = dir.join("m.pgm");
        write_pgm(&img, w, h, &vec![value; w * h]).unwrap();
        write_pgm(&msk, w, h, &vec![0u8; w * h]).unwrap();
        let sample = load_sample(&img, &msk, target).unwrap();
        let expect = value as f32 / 255.0;
        for &v in sample.image.data() {
            prop_assert!((v - expect).abs() < 1e-6, "{v} vs {expect}");
        }
        prop_assert!(sample.mask.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn masks_stay_binary_through_loading_and_resizing(
        w in 3usize..=14,
        h in 3usize..=14,
        seed in any::<u64>(),
        target_pow in 4usize..=5,
    ) {
        let dir = tmpdir("binmask");
        let bits: Vec<u8> =
            (0..w * h).map(|i| if seed.wrapping_mul(i as u64 + 3) % 5 < 2 { 255 } else { 0 }).collect();
        let img = dir.join("i.pgm");
        let msk = dir.join("m.pgm");
        write_pgm(&img, w, h, &bits).unwrap();
        write_pgm(&msk, w, h, &bits).unwrap();
        let sample = load_sample(&img, &msk, 1 << target_pow).unwrap();
        prop_assert!(sample.mask.data().iter().all(|&v| v == 0.0 || v == 1.0));
    }

    #[test]
    fn manifest_rows_keep_their_order_and_splits(rows in prop::collection::vec(0u8..3, 1..20)) {
        let dir = tmpdir("manifest");
        let mut text = String::new();
        for (i, r) in rows.iter().enumerate() {
            let split = ["train", "val", "test"][*r as usize];
            text.push_str(&format!("i{i}.ppm\tm{i}.pgm\t{split}\n"));
        }
        let path = dir.join("m.tsv");
        std::fs::write(&path, text).unwrap();
        let entries = parse_manifest(&path).unwrap();
        prop_assert_eq!(entries.len(), rows.len());
        for (i, (entry, r)) in entries.iter().zip(&rows).enumerate() {
            let want = [Split::Train, Split::Val, Split::Test][*r as usize];
            prop_assert_eq!(entry.split, want);
            let name = format!("i{i}.ppm");
            prop_assert!(entry.image.ends_with(&name), "{:?} should end with {}", entry.image, name);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn window_partition_then_reverse_is_bit_exact(
        b in 1usize..=2,
        win in 1usize..=3,
        gh in 1usize..=3,
        gw in 1usize..=3,
        c in 1usize..=4,
        seed in any::<u64>(),
    ) {
        let (h, w) = (win * gh, win * gw);
        let data: Vec<f32> =
            (0..b * h * w * c).map(|i| (seed.wrapping_mul(i as u64 + 11) % 1000) as f32 / 500.0 - 1.0).collect();
        let mut tape = Tape::<f32>::new(0);
        let x = tape.constant(Tensor::new(&[b, h, w, c], data.clone()));
        let (parts, info) = window_partition(&mut tape, x, win);
        prop_assert_eq!(info.tokens, win * win);
        prop_assert_eq!(info.images * info.per_image * info.tokens, b * h * w);
        let back = window_reverse(&mut tape, parts, win, b, h, w);
        prop_assert_eq!(tape.data(back), &data[..]);
    }

    #[test]
    fn flip_twice_and_four_turns_are_identities(
        s in prop::sample::select(vec![2usize, 4, 6]),
        seed in any::<u64>(),
        turns in 1usize..=3,
    ) {
        let image: Vec<f32> = (0..3 * s * s).map(|i| (seed.wrapping_mul(i as u64 + 5) % 256) as f32 / 255.0).collect();
        let mask: Vec<f32> = (0..s * s).map(|i| ((seed >> 7).wrapping_mul(i as u64 + 9) % 2) as f32).collect();
        let sample = Sample {
            image: Tensor::new(&[3, s, s], image),
            mask: Tensor::new(&[1, s, s], mask),
        };
        let double_flip = augment(&augment(&sample, true, 0), true, 0);
        prop_assert_eq!(double_flip.image.data(), sample.image.data());
        prop_assert_eq!(double_flip.mask.data(), sample.mask.data());
        let full_circle = augment(&augment(&sample, false, turns), false, 4 - turns);
        prop_assert_eq!(full_circle.image.data(), sample.image.data());
        prop_assert_eq!(full_circle.mask.data(), sample.mask.data());
    }

    #[test]
    fn balanced_tversky_equals_soft_dice(
        b in 1usize..=2,
        seed in any::<u64>(),
    ) {
        let n = 16usize;
        let logits: Vec<f64> =
            (0..b * n).map(|i| (seed.wrapping_mul(i as u64 + 13) % 1600) as f64 / 200.0 - 4.0).collect();
        let mask: Vec<f64> = (0..b * n).map(|i| ((seed >> 9).wrapping_mul(i as u64 + 17) % 2) as f64).collect();
        let smooth = 1e-6;

        let mut tape = Tape::<f64>::new(0);
        let l = tape.constant(Tensor::new(&[b, 1, 4, 4], logits.clone()));
        let m = tape.constant(Tensor::new(&[b, 1, 4, 4], mask.clone()));
        let t = tversky(&mut tape, l, m, 0.5, 0.5, smooth);
        let got = tape.data(t)[0];

        // Independent soft Dice with doubled smoothing: multiplying the
        // balanced Tversky ratio through by 2 gives (2TP+2s)/(2TP+FP+FN+2s).
        let mut total = 0.0;
        for i in 0..b {
            let (mut tp, mut p_sum, mut g_sum) = (0.0, 0.0, 0.0);
            for j in 0..n {
                let p = 1.0 / (1.0 + (-logits[i * n + j]).exp());
                let g = mask[i * n + j];
                tp += p * g;
                p_sum += p;
                g_sum += g;
            }
            let dice = (2.0 * tp + 2.0 * smooth) / (p_sum + g_sum + 2.0 * smooth);
            total += 1.0 - dice;
        }
        let want = total / b as f64;
        prop_assert!((got - want).abs() < 1e-10, "{got} vs {want}");
    }

    #[test]
    fn metric_accumulator_matches_direct_enumeration(
        b in 1usize..=3,
        seed in any::<u64>(),
    ) {
        let n = 64usize;
        let logits: Vec<f32> =
            (0..b * n).map(|i| if seed.wrapping_mul(i as u64 + 19) % 3 == 0 { 2.5 } else { -1.5 }).collect();
        let mask: Vec<f32> = (0..b * n).map(|i| ((seed >> 5).wrapping_mul(i as u64 + 23) % 2) as f32).collect();
        let mut acc = MetricsAccum::new();
        acc.update(
            &Tensor::new(&[b, 1, 8, 8], logits.clone()),
            &Tensor::new(&[b, 1, 8, 8], mask.clone()),
        );
        let got = acc.finish();

        let eps = 1e-8;
        let (mut dice_sum, mut iou_sum) = (0.0f64, 0.0f64);
        let (mut tp_all, mut fp_all, mut fn_all) = (0.0f64, 0.0f64, 0.0f64);
        for i in 0..b {
            let (mut tp, mut fp, mut fnn) = (0.0f64, 0.0, 0.0);
            for j in 0..n {
                let p = logits[i * n + j] >= 0.0;
                let g = mask[i * n + j] >= 0.5;
                tp += (p && g) as u8 as f64;
                fp += (p && !g) as u8 as f64;
                fnn += (!p && g) as u8 as f64;
            }
            dice_sum += (2.0 * tp + eps) / (2.0 * tp + fp + fnn + eps);
            iou_sum += (tp + eps) / (tp + fp + fnn + eps);
            tp_all += tp;
            fp_all += fp;
            fn_all += fnn;
        }
        prop_assert!((got.dice - dice_sum / b as f64).abs() < 1e-12);
        prop_assert!((got.iou - iou_sum / b as f64).abs() < 1e-12);
        prop_assert!((got.precision - (tp_all + eps) / (tp_all + fp_all + eps)).abs() < 1e-12);
        prop_assert!((got.recall - (tp_all + eps) / (tp_all + fn_all + eps)).abs() < 1e-12);
        prop_assert_eq!(got.images, b);
    }

    #[test]
    fn lr_schedule_respects_bounds_and_linear_warmup(
        total in 1u64..400,
        warmup_frac in 0u64..100,
        step_frac in 0u64..100,
    ) {
        let warmup = total * warmup_frac / 100;
        let step = (total - 1) * step_frac / 99;
        let (lr_max, lr_min) = (1e-3, 1e-6);
        let lr = lr_at(step, total, warmup, lr_max, lr_min);
        prop_assert!(lr > 0.0 && lr <= lr_max + 1e-15, "{lr}");
        if step < warmup {
            let want = lr_max * (step + 1) as f64 / warmup as f64;
            prop_assert!((lr - want).abs() < 1e-15);
        } else {
            prop_assert!(lr >= lr_min - 1e-15, "{lr} below floor after warmup");
        }
    }
}
