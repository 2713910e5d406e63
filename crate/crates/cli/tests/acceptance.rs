//! Release acceptance gate.
//!
//! Each test verifies one numbered release criterion end to end and prints a
//! `criterion N PASS/FAIL` line (run with `--nocapture` to see them all).
//! Criteria 1–6 and 10 are exact contracts checked against independent
//! oracles; 7–9 are desk-scale training runs whose thresholds were frozen
//! from reference runs. Criterion 9 is diagnostic: it reports its direction
//! but never fails the build.

use std::process::Command;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::Value;

use tirdet_core::dataprep::{
    adaptation_pipeline, separate_background, translate_surrogate, translation_losses,
    LabeledImage, SurrogateParams,
};
use tirdet_core::enhance::{build_default_bank, kernel_response, KernelSpec};
use tirdet_core::imgio::{read_pgm, replicate_pad, write_pgm, Image, Mask};
use tirdet_core::metrics::{compute_metrics, confusion, ConfusionCounts};
use tirdet_core::nn::{Tape, Tensor};
use tirdet_core::segnet::{
    build_network, evaluate_network, train, train_with_monitor, HeadKind, NetConfig, TrainConfig,
};
use tirdet_core::synthgen::{gen_dataset, SceneParams};

fn verdict(pass: bool) -> &'static str {
    if pass {
        "PASS"
    } else {
        "FAIL"
    }
}

// ---------------------------------------------------------------------------
// 1. Uniform images produce zero kernel response everywhere, borders included.
// ---------------------------------------------------------------------------

#[test]
fn criterion_01_uniform_images_zero_response() {
    let bank = build_default_bank();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let started = Instant::now();
    let mut max_abs = 0.0f64;
    for _ in 0..100 {
        let w = rng.gen_range(16..=128);
        let h = rng.gen_range(16..=128);
        let level = rng.gen_range(0.0..1.0);
        let image = Image::new(w, h, vec![level; w * h]).unwrap();
        for spec in bank.kernels() {
            let response = kernel_response(&image, spec).unwrap();
            for &v in response.data() {
                max_abs = max_abs.max(v.abs());
            }
        }
    }
    let elapsed = started.elapsed().as_secs_f64();
    let pass = max_abs < 1e-6 && elapsed < 5.0;
    println!(
        "criterion 1 {}: max |response| {max_abs:.2e} over 100 constant images × {} kernels \
         in {elapsed:.2} s (needs < 1e-6, < 5 s)",
        verdict(pass),
        bank.len(),
    );
    assert!(pass, "max |response| {max_abs:.2e}, {elapsed:.2} s");
}

// ---------------------------------------------------------------------------
// 2. conv2d and kernel_response match naive nested-loop oracles.
// ---------------------------------------------------------------------------

fn naive_conv2d(
    x: &Tensor,
    w: &Tensor,
    b: &Tensor,
    stride: usize,
    padding: usize,
    dilation: usize,
) -> Tensor {
    let [n, c_in, h, wd] = x.shape();
    let [c_out, _, kh, kw] = w.shape();
    let h_out = (h + 2 * padding - dilation * (kh - 1) - 1) / stride + 1;
    let w_out = (wd + 2 * padding - dilation * (kw - 1) - 1) / stride + 1;
    let mut out = Vec::with_capacity(n * c_out * h_out * w_out);
    for b_i in 0..n {
        for co in 0..c_out {
            for oy in 0..h_out {
                for ox in 0..w_out {
                    let mut acc = b.at(0, co, 0, 0);
                    for ci in 0..c_in {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (oy * stride + ky * dilation) as isize - padding as isize;
                                let ix = (ox * stride + kx * dilation) as isize - padding as isize;
                                if iy >= 0 && (iy as usize) < h && ix >= 0 && (ix as usize) < wd {
                                    acc += x.at(b_i, ci, iy as usize, ix as usize)
                                        * w.at(co, ci, ky, kx);
                                }
                            }
                        }
                    }
                    out.push(acc);
                }
            }
        }
    }
    Tensor::new([n, c_out, h_out, w_out], out).unwrap()
}

/// The same response via the explicit weight grid over a replicate-padded
/// image — a different accumulation path than the library's red/blue means.
fn naive_kernel_response(image: &Image, spec: &KernelSpec) -> Image {
    let half = (spec.size() - 1) / 2;
    let padded = replicate_pad(image, half, half, half, half);
    let grid = spec.weight_grid();
    let size = spec.size();
    let mut data = Vec::with_capacity(image.width() * image.height());
    for y in 0..image.height() {
        for x in 0..image.width() {
            let mut acc = 0.0;
            for gy in 0..size {
                for gx in 0..size {
                    acc += grid[gy * size + gx] * padded.get(x + gx, y + gy);
                }
            }
            data.push(acc);
        }
    }
    Image::new(image.width(), image.height(), data).unwrap()
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: [usize; 4]) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    Tensor::new(shape, data).unwrap()
}

#[test]
fn criterion_02_convolution_matches_naive_oracles() {
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let started = Instant::now();

    let mut combos = Vec::new();
    for stride in [1, 2] {
        for dilation in [1, 2, 4] {
            for padding in [0, 1, 2] {
                combos.push((stride, dilation, padding));
            }
        }
    }
    let mut max_err = 0.0f64;
    for case in 0..50 {
        let (stride, dilation, padding) = combos[case % combos.len()];
        let n = rng.gen_range(1..=2);
        let c_in = rng.gen_range(1..=3);
        let c_out = rng.gen_range(1..=3);
        let k = [1, 3][rng.gen_range(0..2)]; // the conv contract is odd-only
        let h = rng.gen_range(9..=14);
        let wd = rng.gen_range(9..=14);
        let x = rand_tensor(&mut rng, [n, c_in, h, wd]);
        let w = rand_tensor(&mut rng, [c_out, c_in, k, k]);
        let b = rand_tensor(&mut rng, [1, c_out, 1, 1]);

        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone());
        let wv = tape.leaf(w.clone());
        let bv = tape.leaf(b.clone());
        let y = tape.conv2d(xv, wv, bv, stride, padding, dilation).unwrap();
        let got = tape.value(y);
        let want = naive_conv2d(&x, &w, &b, stride, padding, dilation);
        assert_eq!(got.shape(), want.shape());
        for (g, w_) in got.data().iter().zip(want.data()) {
            max_err = max_err.max((g - w_).abs());
        }
    }

    let bank = build_default_bank();
    for spec in bank.kernels() {
        for _ in 0..3 {
            let w = rng.gen_range(16..=32);
            let h = rng.gen_range(16..=32);
            let data = (0..w * h).map(|_| rng.gen_range(0.0..1.0)).collect();
            let image = Image::new(w, h, data).unwrap();
            let got = kernel_response(&image, spec).unwrap();
            let want = naive_kernel_response(&image, spec);
            for (g, w_) in got.data().iter().zip(want.data()) {
                max_err = max_err.max((g - w_).abs());
            }
        }
    }

    let elapsed = started.elapsed().as_secs_f64();
    let pass = max_err < 1e-10 && elapsed < 30.0;
    println!(
        "criterion 2 {}: 50 conv cases + {} kernel-response cases, max |Δ| {max_err:.2e} \
         in {elapsed:.2} s (needs < 1e-10, < 30 s)",
        verdict(pass),
        bank.len() * 3,
    );
    assert!(pass, "max err {max_err:.2e}, {elapsed:.2} s");
}

// ---------------------------------------------------------------------------
// 3. Every layer and the full network pass finite-difference gradient checks.
// ---------------------------------------------------------------------------

#[test]
fn criterion_03_gradients_match_finite_differences() {
    let started = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let status = Command::new(env!("CARGO_BIN_EXE_tirdet"))
        .current_dir(dir.path())
        .args(["gradcheck", "--out", "g"])
        .status()
        .expect("binary runs");
    let report: Value = serde_json::from_str(
        &std::fs::read_to_string(dir.path().join("g/gradcheck.json")).unwrap(),
    )
    .unwrap();
    let checks = report["checks"].as_array().unwrap();
    let mut layer_worst = 0.0f64;
    let mut full_worst = 0.0f64;
    for c in checks {
        let err = c["max_rel_err"].as_f64().unwrap();
        if c["name"] == "full_network" {
            full_worst = full_worst.max(err);
        } else {
            layer_worst = layer_worst.max(err);
        }
    }
    let elapsed = started.elapsed().as_secs_f64();
    let pass = status.success()
        && report["all_passed"] == Value::Bool(true)
        && layer_worst < 1e-4
        && full_worst < 1e-3
        && elapsed < 120.0;
    println!(
        "criterion 3 {}: {} layer checks max rel err {layer_worst:.2e} (< 1e-4), full network \
         {full_worst:.2e} over 110 sampled parameters on 8×8 (< 1e-3), in {elapsed:.1} s (< 120 s)",
        verdict(pass),
        checks.len() - 1,
    );
    assert!(pass, "layers {layer_worst:.2e}, full {full_worst:.2e}");
}

// ---------------------------------------------------------------------------
// 4. Confusion counting and the derived metrics match brute force exactly.
// ---------------------------------------------------------------------------

fn oracle_ratio(num: u64, den: u64) -> Option<f64> {
    if den == 0 {
        None
    } else {
        Some(num as f64 / den as f64)
    }
}

fn oracle_metrics(c: &ConfusionCounts) -> (Option<f64>, Option<f64>, Option<f64>, Option<f64>, [Option<f64>; 2]) {
    let (tp, fp, fn_, tn) = (
        c.true_positives,
        c.false_positives,
        c.false_negatives,
        c.true_negatives,
    );
    let iou_t = oracle_ratio(tp, tp + fp + fn_);
    let iou_b = oracle_ratio(tn, tn + fp + fn_);
    let miou = match (iou_t, iou_b) {
        (Some(a), Some(b)) => Some((a + b) / 2.0),
        _ => None,
    };
    let recall = oracle_ratio(tp, tp + fn_);
    let precision = oracle_ratio(tp, tp + fp);
    let f1 = match (recall, precision) {
        (Some(r), Some(p)) if r + p > 0.0 => Some(2.0 * r * p / (r + p)),
        _ => None,
    };
    (miou, recall, precision, f1, [iou_t, iou_b])
}

fn random_mask(rng: &mut ChaCha8Rng, w: usize, h: usize) -> Mask {
    let data = (0..w * h).map(|_| u8::from(rng.gen_bool(0.5))).collect();
    Mask::new(w, h, data).unwrap()
}

#[test]
fn criterion_04_metrics_match_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(404);

    for _ in 0..1000 {
        let pred = random_mask(&mut rng, 16, 16);
        let truth = random_mask(&mut rng, 16, 16);
        let got = confusion(&pred, &truth).unwrap();
        let mut want = ConfusionCounts::default();
        for (p, t) in pred.data().iter().zip(truth.data()) {
            match (p, t) {
                (1, 1) => want.true_positives += 1,
                (1, 0) => want.false_positives += 1,
                (0, 1) => want.false_negatives += 1,
                _ => want.true_negatives += 1,
            }
        }
        assert_eq!(got, want);
    }

    let mut undefined_seen = 0u32;
    for case in 0..10_000 {
        // Small ranges so zero denominators come up constantly.
        let counts = ConfusionCounts {
            true_positives: rng.gen_range(0..6),
            false_positives: rng.gen_range(0..6),
            false_negatives: rng.gen_range(0..6),
            true_negatives: rng.gen_range(0..6),
        };
        if counts.total() == 0 {
            assert!(compute_metrics(counts).is_err(), "zero pixels must error");
            continue;
        }
        let got = compute_metrics(counts.clone()).unwrap();
        let (miou, recall, precision, f1, per_class) = oracle_metrics(&counts);
        assert_eq!(got.miou, miou, "case {case}: {counts:?}");
        assert_eq!(got.recall, recall, "case {case}");
        assert_eq!(got.precision, precision, "case {case}");
        assert_eq!(got.f1, f1, "case {case}");
        assert_eq!(got.per_class_iou, per_class, "case {case}");
        for (name, value) in [
            ("miou", miou),
            ("recall", recall),
            ("precision", precision),
            ("f1", f1),
            ("per_class_iou[0]", per_class[0]),
            ("per_class_iou[1]", per_class[1]),
        ] {
            assert_eq!(
                value.is_none(),
                got.undefined_fields.iter().any(|f| f == name),
                "case {case}: `{name}` undefined-marker mismatch"
            );
            if value.is_none() {
                undefined_seen += 1;
            }
        }
    }
    // Degenerate corners explicitly: no predicted or true targets at all.
    let no_targets = compute_metrics(ConfusionCounts {
        true_negatives: 9,
        ..Default::default()
    })
    .unwrap();
    assert_eq!(no_targets.miou, None);
    assert_eq!(no_targets.recall, None);
    assert_eq!(no_targets.precision, None);
    assert_eq!(no_targets.f1, None);
    assert!(no_targets.undefined_fields.len() == 5);

    let pass = undefined_seen > 0;
    println!(
        "criterion 4 PASS: 1000 mask pairs and 10000 count tuples match brute force exactly \
         ({undefined_seen} undefined 0/0 fields marked correctly)"
    );
    assert!(pass, "the random sweep never hit a 0/0 case");
}

// ---------------------------------------------------------------------------
// 5. The separation pipeline returns target pixels bit-exactly and never
//    leaks target intensities into the background fill.
// ---------------------------------------------------------------------------

#[test]
fn criterion_05_separation_preserves_target_pixels() {
    let mut rng = ChaCha8Rng::seed_from_u64(505);
    let mut target_px_checked = 0u64;

    for i in 0..200 {
        let w = rng.gen_range(8..24);
        let h = rng.gen_range(8..24);
        let data = (0..w * h).map(|_| rng.gen_range(0.0..1.0)).collect();
        let image = Image::new(w, h, data).unwrap();
        let mut mask_data: Vec<u8> = (0..w * h).map(|_| u8::from(rng.gen_bool(0.15))).collect();
        mask_data[0] = 0; // keep at least one background pixel
        let mask = Mask::new(w, h, mask_data).unwrap();
        let item = LabeledImage::new(image, mask).unwrap();

        let surrogate_seed = 7000 + i;
        let mut surrogate_rng = ChaCha8Rng::seed_from_u64(surrogate_seed);
        let params = SurrogateParams {
            reference: None,
            sigma_row: 0.04,
            sigma_px: 0.02,
        };
        let mut translators: Vec<Box<dyn FnMut(&Image) -> tirdet_core::Result<Image>>> = vec![
            Box::new(|img: &Image| Ok(img.clone())),
            Box::new(|img: &Image| {
                Image::new(
                    img.width(),
                    img.height(),
                    img.data().iter().map(|v| v + 0.125).collect(),
                )
            }),
            Box::new(move |img: &Image| translate_surrogate(img, &params, &mut surrogate_rng)),
        ];
        for translate in &mut translators {
            let out = adaptation_pipeline(&item, translate).unwrap();
            for y in 0..item.image.height() {
                for x in 0..item.image.width() {
                    if item.mask.get(x, y) == 1 {
                        assert_eq!(
                            out.get(x, y).to_bits(),
                            item.image.get(x, y).to_bits(),
                            "target pixel ({x},{y}) altered in item {i}"
                        );
                        target_px_checked += 1;
                    }
                }
            }
        }
    }

    // Sentinel injection: plant an absurd target value on a flat background
    // and verify nothing resembling it appears in the separated image or in
    // the background half of the pipeline output.
    const SENTINEL: f64 = 1e6;
    let w = 16;
    let mut data = vec![0.31; w * w];
    let mut mask_data = vec![0u8; w * w];
    for (x, y) in [(5, 5), (5, 6), (6, 5), (10, 11)] {
        data[y * w + x] = SENTINEL;
        mask_data[y * w + x] = 1;
    }
    let item = LabeledImage::new(
        Image::new(w, w, data).unwrap(),
        Mask::new(w, w, mask_data).unwrap(),
    )
    .unwrap();
    let separated = separate_background(&item).unwrap();
    let leak_free = separated.data().iter().all(|&v| v.abs() < 1.0);
    let piped = adaptation_pipeline(&item, |img| Ok(img.clone())).unwrap();
    let mut background_clean = true;
    for y in 0..w {
        for x in 0..w {
            if item.mask.get(x, y) == 0 && piped.get(x, y).abs() >= 1.0 {
                background_clean = false;
            }
        }
    }

    let pass = leak_free && background_clean && target_px_checked > 0;
    println!(
        "criterion 5 {}: {target_px_checked} target pixels bit-exact across 200 items × 3 \
         translators; sentinel never leaked into the fill",
        verdict(pass),
    );
    assert!(pass);
}

// ---------------------------------------------------------------------------
// 6. The translation objective reproduces hand-computed values.
// ---------------------------------------------------------------------------

#[test]
fn criterion_06_translation_losses_match_hand_values() {
    let tol = 1e-12;
    let constant = |w: usize, h: usize, v: f64| Image::new(w, h, vec![v; w * h]).unwrap();
    let identity = |img: &Image| Ok(img.clone());
    let shift = |delta: f64| {
        move |img: &Image| {
            Image::new(
                img.width(),
                img.height(),
                img.data().iter().map(|v| v + delta).collect(),
            )
        }
    };
    let mut worst = 0.0f64;
    let mut check = |name: &str, got: f64, want: f64| {
        worst = worst.max((got - want).abs());
        assert!(
            (got - want).abs() < tol,
            "{name}: got {got}, want {want}"
        );
    };

    // Blind discriminators (D ≡ 0.5), identity generators: each adversarial
    // term is 0.5 + 0.5 = 1.0, reconstructions vanish, total 2.0.
    let src = [constant(4, 4, 0.2)];
    let tgt = [constant(4, 4, 0.7)];
    let l = translation_losses(&src, &tgt, identity, identity, |_| Ok(0.5), |_| Ok(0.5)).unwrap();
    check("blind adv_s_to_t", l.adv_s_to_t, 1.0);
    check("blind adv_t_to_s", l.adv_t_to_s, 1.0);
    check("blind recon_s", l.recon_s, 0.0);
    check("blind recon_t", l.recon_t, 0.0);
    check("blind total", l.total, 2.0);

    // Perfect d_s (always 1), never-fooled d_t (always 0): all mass lands in
    // the source→target direction.
    let l = translation_losses(&src, &tgt, identity, identity, |_| Ok(1.0), |_| Ok(0.0)).unwrap();
    check("one-sided adv_s_to_t", l.adv_s_to_t, 2.0);
    check("one-sided adv_t_to_s", l.adv_t_to_s, 0.0);
    check("one-sided total", l.total, 2.0);

    // Both generators shift +0.25, so each round trip is off by exactly 0.5.
    let l = translation_losses(&src, &tgt, shift(0.25), shift(0.25), |_| Ok(0.0), |_| Ok(0.0))
        .unwrap();
    check("drift adv_s_to_t", l.adv_s_to_t, 1.0);
    check("drift adv_t_to_s", l.adv_t_to_s, 1.0);
    check("drift recon_s", l.recon_s, 0.5);
    check("drift recon_t", l.recon_t, 0.5);
    check("drift total", l.total, 3.0);

    // Mean-reading discriminators over two-image batches, identity
    // generators: adv terms average the batch means.
    let src2 = [constant(4, 4, 0.2), constant(4, 4, 0.4)];
    let tgt2 = [constant(4, 4, 0.6), constant(4, 4, 0.8)];
    let mean = |img: &Image| img.data().iter().sum::<f64>() / img.data().len() as f64;
    let l = translation_losses(
        &src2,
        &tgt2,
        identity,
        identity,
        |img| Ok(mean(img)),
        |img| Ok(1.0 - mean(img)),
    )
    .unwrap();
    check("batch adv_s_to_t", l.adv_s_to_t, 0.7 + 0.3);
    check("batch adv_t_to_s", l.adv_t_to_s, 0.7 + 0.3);
    check("batch total", l.total, 2.0);

    // A collapsing generator (everything → 0.5) against identity: both
    // round trips are off by 0.4.
    let src3 = [constant(4, 4, 0.1)];
    let tgt3 = [constant(4, 4, 0.9)];
    let collapse = |img: &Image| {
        Ok(Image::new(img.width(), img.height(), vec![0.5; img.data().len()]).unwrap())
    };
    let l = translation_losses(&src3, &tgt3, collapse, identity, |_| Ok(0.5), |_| Ok(0.5)).unwrap();
    check("collapse recon_s", l.recon_s, 0.4);
    check("collapse recon_t", l.recon_t, 0.4);
    check("collapse total", l.total, 2.8);

    println!(
        "criterion 6 PASS: five constructed objectives reproduced to 1e-12 \
         (worst |Δ| {worst:.2e})"
    );
}

// ---------------------------------------------------------------------------
// 7. Desk-scale training reaches held-out mIOU ≥ 0.80 within budget.
// ---------------------------------------------------------------------------

#[test]
fn criterion_07_desk_scale_training_reaches_miou() {
    let base = SceneParams::default();
    let train_set = gen_dataset(&base, 200, 1).unwrap();
    let test_set = gen_dataset(&base, 50, 2).unwrap();
    let cfg = TrainConfig::default();
    let mut net = build_network(NetConfig::default()).unwrap();

    let started = Instant::now();
    let mut best = 0.0f64;
    let mut reached_at = None;
    let report = train_with_monitor(&mut net, &train_set.items, &cfg, |epoch, _, net| {
        let miou = evaluate_network(net, &test_set.items)?
            .pooled
            .miou
            .unwrap_or(0.0);
        best = best.max(miou);
        if miou >= 0.80 {
            reached_at = Some(epoch);
        }
        Ok(reached_at.is_some())
    })
    .unwrap();
    let wall = started.elapsed().as_secs_f64();

    let pass = reached_at.is_some() && report.epochs_run <= 30 && wall < 600.0;
    println!(
        "criterion 7 {}: held-out mIOU {best:.3} after {} epochs, {wall:.0} s on 200 train / \
         50 test 64×64 scenes (needs ≥ 0.80 within 30 epochs, < 600 s)",
        verdict(pass),
        report.epochs_run,
    );
    assert!(pass, "best mIOU {best:.3}, epochs {}, {wall:.0} s", report.epochs_run);
}

// ---------------------------------------------------------------------------
// 8. At low SNR the frozen kernel head recalls at least as much as the
//    trainable one, averaged over 3 seeds.
// ---------------------------------------------------------------------------

#[test]
fn criterion_08_fixed_head_recall_at_low_snr() {
    let base = SceneParams {
        target_snr: 2.25, // ±30% jitter keeps every item inside [1.5, 3]
        ..Default::default()
    };
    let mut fixed_recalls = Vec::new();
    let mut free_recalls = Vec::new();
    for seed in 0..3u64 {
        let train_set = gen_dataset(&base, 80, 100 + seed).unwrap();
        let test_set = gen_dataset(&base, 50, 200 + seed).unwrap();
        let cfg = TrainConfig {
            epochs: 8,
            batch_size: 8,
            seed,
            ..Default::default()
        };
        for head in [HeadKind::Fixed, HeadKind::Free] {
            let mut net = build_network(NetConfig {
                head,
                seed,
                ..Default::default()
            })
            .unwrap();
            train(&mut net, &train_set.items, &cfg).unwrap();
            let recall = evaluate_network(&net, &test_set.items)
                .unwrap()
                .pooled
                .recall
                .unwrap_or(0.0);
            match head {
                HeadKind::Fixed => fixed_recalls.push(recall),
                HeadKind::Free => free_recalls.push(recall),
            }
        }
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let (fixed, free) = (mean(&fixed_recalls), mean(&free_recalls));
    let pass = fixed >= free;
    println!(
        "criterion 8 {}: low-SNR mean recall fixed head {fixed:.3} vs trainable head {free:.3} \
         over 3 seeds (needs fixed ≥ trainable)",
        verdict(pass),
    );
    assert!(pass, "fixed {fixed:.3} < free {free:.3}");
}

// ---------------------------------------------------------------------------
// 9. Translated source data added to a small held-in set helps (diagnostic).
// ---------------------------------------------------------------------------

#[test]
fn criterion_09_translated_augmentation_direction() {
    let real_style = SceneParams {
        target_snr: 3.0,
        clutter_amplitude: 0.09,
        clutter_wavelength: 11.0,
        row_noise_sigma: 0.02,
        pixel_noise_sigma: 0.03,
        ..Default::default()
    };
    let source_style = SceneParams {
        target_snr: 5.0,
        clutter_amplitude: 0.03,
        clutter_wavelength: 20.0,
        row_noise_sigma: 0.0,
        pixel_noise_sigma: 0.008,
        ..real_style.clone()
    };

    let mut held_in_only = Vec::new();
    let mut combined = Vec::new();
    for seed in 0..3u64 {
        let held_in = gen_dataset(&real_style, 24, 300 + seed).unwrap();
        let source = gen_dataset(&source_style, 96, 400 + seed).unwrap();
        let test_set = gen_dataset(&real_style, 50, 500 + seed).unwrap();

        // Translate the clean source items toward the target style: match a
        // held-in reference histogram and add its noise character, keeping
        // every labeled target pixel bit-intact.
        let reference = held_in.items[0].image.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(900 + seed);
        let translated: Vec<LabeledImage> = source
            .items
            .iter()
            .map(|item| {
                let params = SurrogateParams {
                    reference: Some(reference.clone()),
                    sigma_row: 0.02,
                    sigma_px: 0.03,
                };
                let image =
                    adaptation_pipeline(item, |img| translate_surrogate(img, &params, &mut rng))
                        .unwrap();
                LabeledImage::new(image, item.mask.clone()).unwrap()
            })
            .collect();

        let cfg = TrainConfig {
            epochs: 8,
            batch_size: 8,
            seed,
            ..Default::default()
        };
        let mut net_a = build_network(NetConfig {
            seed,
            ..Default::default()
        })
        .unwrap();
        train(&mut net_a, &held_in.items, &cfg).unwrap();
        let miou_a = evaluate_network(&net_a, &test_set.items)
            .unwrap()
            .pooled
            .miou
            .unwrap_or(0.0);

        let mut all: Vec<LabeledImage> = held_in.items.clone();
        all.extend(translated);
        let mut net_b = build_network(NetConfig {
            seed,
            ..Default::default()
        })
        .unwrap();
        train(&mut net_b, &all, &cfg).unwrap();
        let miou_b = evaluate_network(&net_b, &test_set.items)
            .unwrap()
            .pooled
            .miou
            .unwrap_or(0.0);

        held_in_only.push(miou_a);
        combined.push(miou_b);
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let (alone, augmented) = (mean(&held_in_only), mean(&combined));
    let pass = augmented >= alone;
    println!(
        "criterion 9 {} (diagnostic): mIOU {augmented:.3} with translated augmentation vs \
         {alone:.3} held-in alone over 3 seeds{}",
        verdict(pass),
        if pass {
            ""
        } else {
            " — direction did not hold at this scale; flagged, not build-blocking"
        },
    );
    // Diagnostic by design: report the direction, never fail the build on it.
}

// ---------------------------------------------------------------------------
// 10. kfold reruns from its manifest byte-identically; PGM round-trips are
//     value-exact.
// ---------------------------------------------------------------------------

#[test]
fn criterion_10_kfold_rerun_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let run = |args: &[&str]| {
        let out = Command::new(env!("CARGO_BIN_EXE_tirdet"))
            .current_dir(dir.path())
            .args(args)
            .output()
            .expect("binary runs");
        assert!(
            out.status.success(),
            "tirdet {args:?}: {}",
            String::from_utf8_lossy(&out.stderr)
        );
    };
    run(&[
        "gen", "--width", "32", "--height", "32", "--count", "12", "--out", "data",
    ]);
    run(&[
        "kfold", "--manifest", "data/manifest.json", "--k", "3", "--epochs", "2", "--out", "k1",
    ]);
    run(&["kfold", "--config", "k1/run_manifest.json", "--out", "k2"]);
    let metrics_a = std::fs::read(dir.path().join("k1/metrics.json")).unwrap();
    let metrics_b = std::fs::read(dir.path().join("k2/metrics.json")).unwrap();
    let rerun_identical = metrics_a == metrics_b;

    // PGM round-trips: the first write quantizes; after that, read → write
    // → read must be exact in both value and bytes.
    let mut rng = ChaCha8Rng::seed_from_u64(1010);
    let mut roundtrip_exact = true;
    for _ in 0..20 {
        let w = rng.gen_range(4..32);
        let h = rng.gen_range(4..32);
        let data = (0..w * h).map(|_| rng.gen_range(0.0..=1.0)).collect();
        let image = Image::new(w, h, data).unwrap();
        let p1 = dir.path().join("rt1.pgm");
        let p2 = dir.path().join("rt2.pgm");
        write_pgm(&image, &p1, 65535).unwrap();
        let once = read_pgm(&p1).unwrap();
        write_pgm(&once, &p2, 65535).unwrap();
        let twice = read_pgm(&p2).unwrap();
        if once != twice || std::fs::read(&p1).unwrap() != std::fs::read(&p2).unwrap() {
            roundtrip_exact = false;
        }
    }

    let pass = rerun_identical && roundtrip_exact;
    println!(
        "criterion 10 {}: 3-fold rerun from its manifest matched metrics.json byte-for-byte \
         ({} bytes); 20 PGM round-trips value-exact",
        verdict(pass),
        metrics_a.len(),
    );
    assert!(
        pass,
        "rerun identical: {rerun_identical}, round-trips exact: {roundtrip_exact}"
    );
}
