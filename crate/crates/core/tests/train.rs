use std::collections::HashMap;

use mae_core::data::{synth, AugmentSpec, ChannelStats};
use mae_core::mae::MaeConfig;
use mae_core::rng::StreamRng;
use mae_core::train::*;
use mae_core::vit::{init_classifier, vit_classify, Params, ViTConfig, ENCODER};
use mae_core::{Tape, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_distr::{Distribution, Normal};

fn tiny_vit() -> ViTConfig {
    ViTConfig {
        image_size: 8,
        patch_size: 4,
        channels: 3,
        depth: 2,
        width: 16,
        heads: 2,
        mlp_ratio: 2,
    }
}

fn tiny_mae() -> MaeConfig {
    MaeConfig {
        encoder: tiny_vit(),
        decoder_depth: 1,
        decoder_width: 8,
        decoder_heads: 2,
        ..MaeConfig::tiny_desk()
    }
}

fn tiny_corpus(count: usize) -> Corpus {
    let train = synth::generate(&synth::SynthSpec::new(count, 8, 2), 5).unwrap();
    let test = synth::generate(&synth::SynthSpec::new(8, 8, 2), 6).unwrap();
    Corpus::new(train, Some(test))
}

fn quick(recipe: TrainRecipe, epochs: usize) -> TrainRecipe {
    TrainRecipe {
        batch_size: 4,
        epochs,
        warmup_epochs: 1.0,
        base_lr: 0.05,
        ..recipe
    }
}

#[test]
fn effective_lr_examples() {
    assert_eq!(effective_lr(0.37, 256), 0.37);
    assert_eq!(effective_lr(1.5e-4, 4096), 2.4e-3);
    assert!((effective_lr(0.1, 16384) - 6.4).abs() < 1e-12);
}

#[test]
fn schedule_boundaries() {
    let peak = 2.4e-3;
    assert_eq!(lr_at(0, 40, 800, peak).unwrap(), 0.0);
    assert_eq!(lr_at(40, 40, 800, peak).unwrap(), peak);
    assert!(lr_at(800, 40, 800, peak).unwrap().abs() < 1e-12);
    assert!((lr_at(20, 40, 800, peak).unwrap() - peak / 2.0).abs() < 1e-15);
    // halfway through the cosine the rate is half the peak
    assert!((lr_at(420, 40, 800, peak).unwrap() - peak / 2.0).abs() < 1e-15);
    assert!(lr_at(0, 801, 800, peak).is_err());
    assert_eq!(lr_at(0, 0, 10, 1.0).unwrap(), 1.0);
}

proptest! {
    #[test]
    fn schedule_rises_then_falls(warmup in 0usize..50, extra in 1usize..200, peak in 1e-4f64..1.0) {
        let total = warmup + extra;
        let lrs: Vec<f64> = (0..=total).map(|s| lr_at(s, warmup, total, peak).unwrap()).collect();
        for s in 0..total {
            if s < warmup {
                prop_assert!(lrs[s + 1] >= lrs[s]);
            } else {
                prop_assert!(lrs[s + 1] <= lrs[s]);
            }
            prop_assert!(lrs[s] <= peak * (1.0 + 1e-12));
        }
    }
}

/// Scalar AdamW written out step by step.
fn adamw_oracle(theta0: f64, grads: &[f64], lr: f64, wd: f64, b1: f64, b2: f64, eps: f64) -> f64 {
    let (mut theta, mut m, mut v) = (theta0, 0.0, 0.0);
    for (i, g) in grads.iter().enumerate() {
        let t = (i + 1) as i32;
        theta -= lr * wd * theta;
        m = b1 * m + (1.0 - b1) * g;
        v = b2 * v + (1.0 - b2) * g * g;
        let m_hat = m / (1.0 - b1.powi(t));
        let v_hat = v / (1.0 - b2.powi(t));
        theta -= lr * m_hat / (v_hat.sqrt() + eps);
    }
    theta
}

#[test]
fn adamw_single_step_by_hand() {
    let (mut theta, mut m, mut v) = ([1.0f64], [0.0], [0.0]);
    adamw_update(&mut theta, &[1.0], &mut m, &mut v, 1, 0.1, 0.0, (0.9, 0.999), 1e-8);
    // bias-corrected moments are exactly g and g², so the step is lr·1/(1+eps)
    let want = 1.0 - 0.1 / (1.0 + 1e-8);
    assert!((theta[0] - want).abs() < 1e-12, "{} vs {want}", theta[0]);
}

#[test]
fn adamw_matches_scalar_oracle_over_steps() {
    let grads = [0.3, -1.2, 0.7, 2.0, -0.1];
    let (mut theta, mut m, mut v) = ([0.8f64], [0.0], [0.0]);
    for (i, g) in grads.iter().enumerate() {
        adamw_update(&mut theta, &[*g], &mut m, &mut v, i as u32 + 1, 0.01, 0.05, (0.9, 0.95), 1e-8);
    }
    let want = adamw_oracle(0.8, &grads, 0.01, 0.05, 0.9, 0.95, 1e-8);
    assert!((theta[0] - want).abs() < 1e-12);
}

#[test]
fn adamw_zero_grad_cases() {
    let (mut theta, mut m, mut v) = ([0.5f64, -2.0], [0.0; 2], [0.0; 2]);
    for t in 1..=5 {
        adamw_update(&mut theta, &[0.0, 0.0], &mut m, &mut v, t, 0.1, 0.0, (0.9, 0.95), 1e-8);
    }
    assert_eq!(theta, [0.5, -2.0]);

    let (lr, wd) = (0.1, 0.05);
    for t in 1..=7 {
        adamw_update(&mut theta, &[0.0, 0.0], &mut m, &mut v, t, lr, wd, (0.9, 0.95), 1e-8);
        let shrink = (1.0f64 - lr * wd).powi(t as i32);
        assert!((theta[0] - 0.5 * shrink).abs() < 1e-14);
        assert!((theta[1] + 2.0 * shrink).abs() < 1e-14);
    }
}

#[test]
fn sgd_momentum_matches_recurrence() {
    let (mut theta, mut buf) = ([1.0f64], [0.0]);
    let grads = [1.0, 0.5, -0.25];
    let (mut t_ref, mut b_ref) = (1.0, 0.0);
    for g in grads {
        sgd_update(&mut theta, &[g], &mut buf, 0.1, 0.9, 0.0);
        b_ref = 0.9 * b_ref + g;
        t_ref -= 0.1 * b_ref;
    }
    assert_eq!(theta[0], t_ref);
}

fn classifier_params(cfg: &ViTConfig) -> Params {
    init_classifier(cfg, 3, &mut StreamRng::seed_from_u64(4))
}

#[test]
fn layer_decay_multipliers() {
    let cfg = ViTConfig { depth: 4, ..tiny_vit() };
    let params = classifier_params(&cfg);
    let groups = layerwise_groups(&params, |_| true, 4, 1.0);
    assert!(groups.iter().all(|g| g.lr_scale == 1.0));

    let groups = layerwise_groups(&params, |_| true, 4, 0.75);
    let scale_of = |name: &str| {
        groups
            .iter()
            .find(|g| g.names.iter().any(|n| n == name))
            .map(|g| g.lr_scale)
            .unwrap()
    };
    assert_eq!(scale_of("head.weight"), 1.0);
    assert_eq!(scale_of("encoder.norm.weight"), 1.0);
    assert_eq!(scale_of("encoder.blocks.3.mlp.fc1.weight"), 0.75);
    assert_eq!(scale_of("encoder.blocks.0.attn.q.weight"), 0.75f64.powi(4));
    let embed = scale_of("encoder.patch_embed.weight");
    assert!((embed - 0.2373).abs() < 1e-4);
    assert_eq!(embed, scale_of("encoder.cls_token"));

    // every parameter lands in exactly one group
    let mut seen: HashMap<&str, usize> = HashMap::new();
    for g in &groups {
        for n in &g.names {
            *seen.entry(n).or_default() += 1;
        }
    }
    assert_eq!(seen.len(), params.len());
    assert!(seen.values().all(|&c| c == 1));
}

proptest! {
    #[test]
    fn layer_decay_grows_toward_the_head(decay in 0.05f64..0.999) {
        let depth = 4;
        let mut names = vec!["encoder.patch_embed.weight".to_string()];
        names.extend((0..depth).map(|i| format!("encoder.blocks.{i}.attn.proj.weight")));
        names.push("encoder.norm.weight".into());
        names.push("head.weight".into());
        let scales: Vec<f64> = names.iter().map(|n| layer_scale(n, depth, decay)).collect();
        prop_assert!(scales.windows(2).all(|w| w[0] <= w[1]));

        let params = classifier_params(&ViTConfig { depth, ..tiny_vit() });
        let groups = layerwise_groups(&params, |_| true, depth, decay);
        let best = groups.iter().max_by(|a, b| a.lr_scale.total_cmp(&b.lr_scale)).unwrap();
        prop_assert!(best.names.iter().any(|n| n.starts_with("head.")));
        prop_assert_eq!(best.lr_scale, 1.0);
    }
}

#[test]
fn weight_decay_exemptions() {
    let params = classifier_params(&tiny_vit());
    let groups = layerwise_groups(&params, |_| true, 2, 1.0);
    for g in &groups {
        for n in &g.names {
            let rank = params.get(n).unwrap().rank();
            assert_eq!(g.weight_decay, rank >= 2, "{n}");
        }
    }
    let decayed = |n: &str| groups.iter().any(|g| g.weight_decay && g.names.iter().any(|x| x == n));
    assert!(!decayed("encoder.cls_token"));
    assert!(!decayed("encoder.blocks.0.norm1.weight"));
    assert!(!decayed("head.bias"));
    assert!(decayed("head.weight"));
}

#[test]
fn freeze_assignments() {
    let cfg = tiny_vit();
    let params = classifier_params(&cfg);
    let depth = cfg.depth;
    assert_eq!(freeze_prefix(depth, depth).unwrap(), Freeze::None);
    assert!(freeze_prefix(depth, depth + 1).is_err());
    let everything = freeze_prefix(depth, depth).unwrap();
    assert!(params.names().all(|n| everything.trainable(n, depth)));

    let probe = freeze_prefix(depth, 0).unwrap();
    let trainable: Vec<&str> = params.names().filter(|n| probe.trainable(n, depth)).collect();
    assert_eq!(trainable, ["head.weight", "head.bias"]);

    let one = freeze_prefix(depth, 1).unwrap();
    for n in params.names() {
        let want = n.starts_with("head.") || n.starts_with("encoder.norm.") || n.starts_with("encoder.blocks.1.");
        assert_eq!(one.trainable(n, depth), want, "{n}");
    }

    for n in params.names() {
        let want = n.starts_with("head.")
            || n.starts_with("encoder.norm.")
            || n.starts_with("encoder.blocks.1.mlp.")
            || n.starts_with("encoder.blocks.1.norm2.");
        assert_eq!(Freeze::LastMlp.trainable(n, depth), want, "{n}");
    }
}

#[test]
fn probe_freeze_leaves_only_head_gradients() {
    let cfg = tiny_vit();
    let params = classifier_params(&cfg);
    let freeze = Freeze::LastBlocks(0);
    let mut r = StreamRng::seed_from_u64(9);
    let images: Tensor<f32> = Tensor::from_fn(&[2, 8, 8, 3], |_| r.random_range(-1.0..1.0));
    let tape = Tape::new();
    let bound = params.bind(&tape, |n| freeze.trainable(n, cfg.depth));
    let logits = vit_classify(&images, &bound, &cfg, 0.0, None).unwrap();
    let loss = logits.soft_cross_entropy(smooth_targets(&[0, 2], 3, 0.0)).unwrap();
    let grads = bound.gradients(&tape.backward(loss).unwrap());
    let mut names: Vec<&String> = grads.keys().collect();
    names.sort();
    assert_eq!(names, ["head.bias", "head.weight"]);
    assert!(grads["head.weight"].data().iter().any(|&g| g != 0.0));
}

fn frozen_digest(params: &Params, freeze: Freeze, depth: usize) -> u64 {
    params.digest(|n| !freeze.trainable(n, depth))
}

#[test]
fn frozen_parameters_are_bit_identical_after_training() {
    let cfg = tiny_vit();
    let corpus = tiny_corpus(40);
    let init = classifier_params(&cfg);
    for freeze in [Freeze::LastBlocks(1), Freeze::LastBlocks(0), Freeze::LastMlp] {
        // 40 images at batch 4: ten optimizer steps
        let recipe = TrainRecipe {
            freeze,
            ..quick(TrainRecipe::partial_finetune(1), 1)
        };
        let run = train_classifier(&cfg, Some(&init), &recipe, &AugmentSpec::pretrain(8), &corpus, 3, &mut |_| {})
            .unwrap();
        let before = frozen_digest(&init, freeze, cfg.depth);
        let after = frozen_digest(&run.params, freeze, cfg.depth);
        assert_eq!(before, after, "{freeze:?}");
        let head = |p: &Params| p.digest(|n| n.starts_with("head."));
        assert_ne!(head(&init), head(&run.params));
        let last = |p: &Params| p.digest(|n| n.starts_with("encoder.blocks.1.mlp."));
        if freeze != Freeze::LastBlocks(0) {
            assert_ne!(last(&init), last(&run.params), "{freeze:?}");
        }
    }
}

#[test]
fn ema_cases() {
    let mut r = StreamRng::seed_from_u64(2);
    let mut a: Params<f64> = Params::new();
    a.insert("w", Tensor::from_fn(&[3, 2], |_| r.random_range(-1.0..1.0)));
    let mut b: Params<f64> = Params::new();
    b.insert("w", Tensor::from_fn(&[3, 2], |_| r.random_range(-1.0..1.0)));

    let mut ema = a.clone();
    ema_update(&mut ema, &b, 0.0).unwrap();
    assert_eq!(ema, b);
    let mut ema = a.clone();
    ema_update(&mut ema, &b, 1.0).unwrap();
    assert_eq!(ema, a);

    let decay: f64 = 0.9;
    let mut ema = a.clone();
    for t in 1..=20 {
        ema_update(&mut ema, &b, decay).unwrap();
        let gap0 = a.get("w").unwrap().data()[0] - b.get("w").unwrap().data()[0];
        let gap = ema.get("w").unwrap().data()[0] - b.get("w").unwrap().data()[0];
        assert!((gap - gap0 * decay.powi(t)).abs() < 1e-12);
    }
}

#[test]
fn ema_with_zero_decay_tracks_the_weights() {
    let cfg = tiny_vit();
    let corpus = tiny_corpus(8);
    let recipe = TrainRecipe {
        ema_decay: 0.0,
        ..quick(TrainRecipe::supervised_scratch(), 2)
    };
    let plain = train_classifier(&cfg, None, &recipe, &AugmentSpec::pretrain(8), &corpus, 1, &mut |_| {}).unwrap();
    assert!(plain.ema.is_none());
    // decay 1e-300 rounds every update to a plain copy
    let tracked = TrainRecipe {
        ema_decay: 1e-300,
        ..recipe
    };
    let run = train_classifier(&cfg, None, &tracked, &AugmentSpec::pretrain(8), &corpus, 1, &mut |_| {}).unwrap();
    assert_eq!(run.ema.as_ref().unwrap(), &run.params);
    assert_eq!(run.params, plain.params);
}

#[test]
fn smoothing_rows() {
    let t = smooth_targets(&[0, 2, 1], 4, 0.1);
    for row in t.data().chunks(4) {
        let s: f32 = row.iter().sum();
        assert!((s - 1.0).abs() < 1e-6);
    }
    assert!((t.data()[0] - (0.9 + 0.025)).abs() < 1e-7);
    assert!((t.data()[1] - 0.025).abs() < 1e-7);
    assert_eq!(smooth_targets(&[1], 2, 0.0).data(), &[0.0, 1.0]);
}

fn constant_images(b: usize, h: usize, w: usize) -> Tensor<f32> {
    Tensor::from_fn(&[b, h, w, 3], |i| (i / (h * w * 3)) as f32 + 1.0)
}

#[test]
fn mixup_with_lambda_one_is_identity() {
    let mut images = constant_images(4, 6, 6);
    let orig = images.clone();
    let mut targets = smooth_targets(&[0, 1, 2, 1], 3, 0.0);
    apply_mix(&mut images, &mut targets, &Mix::Mixup { lambda: 1.0 }).unwrap();
    assert_eq!(images, orig);
    assert_eq!(targets, smooth_targets(&[0, 1, 2, 1], 3, 0.0));
}

#[test]
fn cutmix_label_weight_matches_pasted_area() {
    let mut r = StreamRng::seed_from_u64(17);
    for _ in 0..200 {
        let (b, h, w) = (4, r.random_range(3..20), r.random_range(3..20));
        let mut images = constant_images(b, h, w);
        let labels = [0u32, 1, 2, 3];
        let mut targets = smooth_targets(&labels, 4, 0.0);
        let mix = cutmix_box(h, w, r.random_range(0.0..1.0), &mut r);
        apply_mix(&mut images, &mut targets, &mix).unwrap();
        // image i is constant i+1 and pastes from image b-1-i
        let pasted = images.data()[..h * w * 3]
            .chunks(3)
            .filter(|px| px[0] == b as f32)
            .count();
        let want = 1.0 - pasted as f64 / (h * w) as f64;
        assert_eq!(mix.lambda(), want);
        assert!((targets.data()[0] as f64 - want).abs() < 1e-6);
        assert!((targets.data()[3] as f64 - (1.0 - want)).abs() < 1e-6);
    }
}

proptest! {
    #[test]
    fn mixed_targets_sum_to_one(seed in any::<u64>(), smoothing in 0.0f64..0.5) {
        let mut r = StreamRng::seed_from_u64(seed);
        let mut images = constant_images(6, 8, 8);
        let labels = [0u32, 1, 2, 0, 1, 2];
        let mut targets = smooth_targets(&labels, 3, smoothing);
        let mix = mixup_cutmix(&mut images, &mut targets, 0.8, 1.0, &mut r).unwrap().unwrap();
        prop_assert!((0.0..=1.0).contains(&mix.lambda()));
        for row in targets.data().chunks(3) {
            prop_assert!((row.iter().sum::<f32>() - 1.0).abs() < 1e-5);
        }
    }
}

#[test]
fn mixing_disabled_or_single_image() {
    let mut r = StreamRng::seed_from_u64(1);
    let mut images = constant_images(2, 4, 4);
    let mut targets = smooth_targets(&[0, 1], 2, 0.0);
    assert!(mixup_cutmix(&mut images, &mut targets, 0.0, 0.0, &mut r).unwrap().is_none());
    let mut one = constant_images(1, 4, 4);
    let mut t1 = smooth_targets(&[0], 2, 0.0);
    assert!(mixup_cutmix(&mut one, &mut t1, 0.8, 1.0, &mut r).unwrap().is_none());
}

/// Two Gaussian blobs per class pair, separable along a random direction.
fn separable(n: usize, d: usize, k: usize, seed: u64) -> (Tensor<f32>, Vec<u32>) {
    let mut r = StreamRng::seed_from_u64(seed);
    let centers: Vec<Vec<f64>> = (0..k).map(|_| (0..d).map(|_| r.random_range(-4.0..4.0)).collect()).collect();
    let noise = Normal::new(0.0, 0.3).unwrap();
    let labels: Vec<u32> = (0..n).map(|i| (i % k) as u32).collect();
    let feats = Tensor::from_fn(&[n, d], |i| {
        let (row, j) = (i / d, i % d);
        (centers[labels[row] as usize][j] * 10.0 + 50.0 + noise.sample(&mut r)) as f32
    });
    (feats, labels)
}

fn probe_recipe(epochs: usize) -> TrainRecipe {
    TrainRecipe {
        batch_size: 32,
        epochs,
        warmup_epochs: 1.0,
        base_lr: 0.8,
        ..TrainRecipe::linprobe()
    }
}

#[test]
fn probe_on_separable_features() {
    let (train, labels) = separable(256, 12, 4, 1);
    let (test, test_labels) = separable(128, 12, 4, 1);
    let run = fit_probe(
        |_, idx| train.gather_rows(idx),
        &labels,
        &test,
        &test_labels,
        4,
        &probe_recipe(20),
        0,
        &mut |_| {},
    )
    .unwrap();
    assert!(run.test_acc >= 0.99, "probe accuracy {}", run.test_acc);
}

#[test]
fn probe_fold_preserves_logits() {
    let (train, labels) = separable(200, 10, 3, 2);
    let (held_out, _) = separable(50, 10, 3, 3);
    let run = fit_probe(
        |_, idx| train.gather_rows(idx),
        &labels,
        &train,
        &labels,
        3,
        &probe_recipe(5),
        0,
        &mut |_| {},
    )
    .unwrap();
    let direct = run.head.logits(&held_out).unwrap();
    let folded = run.head.fold().logits(&held_out).unwrap();
    let worst = direct
        .data()
        .iter()
        .zip(folded.data())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    assert!(worst < 1e-5, "fold changed logits by {worst}");
}

#[test]
fn probe_norm_guards_constant_features() {
    let feats = Tensor::<f32>::from_fn(&[16, 3], |i| if i % 3 == 1 { 5.0 } else { (i / 3) as f32 });
    let labels: Vec<u32> = (0..16).map(|i| u32::from(i >= 8)).collect();
    let run = fit_probe(
        |_, idx| feats.gather_rows(idx),
        &labels,
        &feats,
        &labels,
        2,
        &TrainRecipe {
            batch_size: 4,
            ..probe_recipe(20)
        },
        0,
        &mut |_| {},
    )
    .unwrap();
    assert!(run.head.weight.data().iter().all(|w| w.is_finite()));
    assert!(run.test_acc >= 0.9);
}

#[test]
fn batch_norm_statistics() {
    let x = Tensor::<f64>::new(vec![4, 2], vec![1.0, 10.0, 2.0, 10.0, 3.0, 10.0, 4.0, 10.0]).unwrap();
    let mut bn = BatchNorm::new(2);
    let y = bn.train_batch(&x).unwrap();
    let col0: Vec<f64> = y.data().iter().step_by(2).copied().collect();
    let mean: f64 = col0.iter().sum::<f64>() / 4.0;
    let var: f64 = col0.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 4.0;
    assert!(mean.abs() < 1e-12);
    assert!((var - 1.25 / (1.25 + PROBE_BN_EPS)).abs() < 1e-12);
    assert!(y.data().iter().skip(1).step_by(2).all(|&v| v == 0.0));
    // running mean moves 10% toward 2.5; running variance toward the unbiased 5/3
    assert!((bn.running_mean[0] - 0.25).abs() < 1e-12);
    assert!((bn.running_var[0] - (0.9 + 0.1 * 5.0 / 3.0)).abs() < 1e-12);
}

#[test]
fn recipe_presets() {
    let pre = TrainRecipe::pretrain();
    assert_eq!((pre.base_lr, pre.weight_decay, pre.batch_size), (1.5e-4, 0.05, 4096));
    assert_eq!((pre.warmup_epochs, pre.epochs), (40.0, 800));
    assert!(matches!(pre.optimizer, OptimizerKind::AdamW { betas: (0.9, 0.95), .. }));
    assert_eq!(pre.peak_lr(), 2.4e-3);

    let ft = TrainRecipe::finetune();
    assert_eq!((ft.base_lr, ft.layer_decay, ft.batch_size), (1e-3, 0.75, 1024));
    assert_eq!((ft.label_smoothing, ft.mixup_alpha, ft.cutmix_alpha, ft.drop_path_rate), (0.1, 0.8, 1.0, 0.1));
    assert!(matches!(ft.optimizer, OptimizerKind::AdamW { betas: (0.9, 0.999), .. }));

    let lp = TrainRecipe::linprobe();
    assert_eq!(lp.weight_decay, 0.0);
    assert_eq!((lp.base_lr, lp.batch_size, lp.warmup_epochs, lp.epochs), (0.1, 16384, 10.0, 90));
    assert_eq!(lp.optimizer, OptimizerKind::SgdMomentum { momentum: 0.9 });

    let sc = TrainRecipe::supervised_scratch();
    assert_eq!((sc.base_lr, sc.weight_decay, sc.ema_decay, sc.drop_path_rate), (1e-4, 0.3, 0.9999, 0.2));

    assert_eq!(TrainRecipe::partial_finetune(2).epoch_choices, [50, 100, 200]);
    for r in [pre, ft, lp, sc] {
        r.validate().unwrap();
    }
    let bad = TrainRecipe {
        warmup_epochs: 900.0,
        ..TrainRecipe::pretrain()
    };
    assert!(bad.validate().is_err());
}

#[test]
fn pretrain_is_deterministic_and_logs_every_epoch() {
    let cfg = tiny_mae();
    let corpus = tiny_corpus(12);
    let recipe = quick(TrainRecipe::pretrain(), 3);
    let aug = AugmentSpec::pretrain(8);
    let mut seen = Vec::new();
    let a = pretrain(&cfg, &recipe, &aug, &corpus.train, &corpus.stats, 7, &mut |r| seen.push(r.clone())).unwrap();
    let b = pretrain(&cfg, &recipe, &aug, &corpus.train, &corpus.stats, 7, &mut |_| {}).unwrap();
    assert_eq!(a.log, b.log);
    assert_eq!(a.params, b.params);
    assert_eq!(seen, a.log.records);
    assert_eq!(a.log.series("train", "loss").len(), 3);
    assert_eq!(a.log.last("config", "len_keep"), Some(1.0));
    let c = pretrain(&cfg, &recipe, &aug, &corpus.train, &corpus.stats, 8, &mut |_| {}).unwrap();
    assert_ne!(a.params, c.params);
}

#[test]
fn classifier_protocols_are_deterministic() {
    let cfg = tiny_mae();
    let corpus = tiny_corpus(12);
    let init = pretrain(
        &cfg,
        &quick(TrainRecipe::pretrain(), 1),
        &AugmentSpec::pretrain(8),
        &corpus.train,
        &corpus.stats,
        1,
        &mut |_| {},
    )
    .unwrap()
    .params;
    let aug = AugmentSpec::pretrain(8);
    for (kind, recipe) in [
        (Protocol::Finetune, TrainRecipe::finetune()),
        (Protocol::PartialFt, TrainRecipe::partial_finetune(1)),
        (Protocol::Linprobe, TrainRecipe::linprobe()),
        (Protocol::SupervisedScratch, TrainRecipe::supervised_scratch()),
    ] {
        let recipe = quick(recipe, 2);
        let run = |seed| run_protocol(kind, &cfg, &recipe, &aug, &corpus, Some(&init), seed, &mut |_| {}).unwrap();
        let (a, b) = (run(4), run(4));
        assert_eq!(a.log(), b.log(), "{kind:?}");
        assert_eq!(a.log().series("test", "acc").len(), 2);
        assert_eq!(a.log().to_csv(), b.log().to_csv());
    }
}

#[test]
fn protocol_input_checks() {
    let cfg = tiny_mae();
    let corpus = tiny_corpus(8);
    let recipe = quick(TrainRecipe::linprobe(), 1);
    let aug = AugmentSpec::eval(8);
    let err = run_protocol(Protocol::Linprobe, &cfg, &recipe, &aug, &corpus, None, 0, &mut |_| {});
    assert!(err.is_err());

    let deeper = ViTConfig { depth: 3, ..tiny_vit() };
    let params = classifier_params(&deeper);
    let err = run_protocol(Protocol::Linprobe, &cfg, &recipe, &aug, &corpus, Some(&params), 0, &mut |_| {});
    assert!(err.unwrap_err().to_string().contains("3 blocks"));

    let wrong_size = AugmentSpec::eval(16);
    assert!(run_protocol(Protocol::Finetune, &cfg, &recipe, &wrong_size, &corpus, None, 0, &mut |_| {}).is_err());

    let gray = Corpus::new(mae_core::data::PackedDataset::new(8, 8, 1, 2), None);
    assert!(matches!(
        run_protocol(Protocol::Finetune, &cfg, &recipe, &aug, &gray, None, 0, &mut |_| {}),
        Err(mae_core::Error::Data(_))
    ));
    let too_deep = TrainRecipe {
        freeze: Freeze::LastBlocks(5),
        ..recipe
    };
    assert!(train_classifier(&tiny_vit(), None, &too_deep, &aug, &corpus, 0, &mut |_| {}).is_err());
}

#[test]
fn pretrained_encoder_weights_are_loaded() {
    let cfg = tiny_mae();
    let corpus = tiny_corpus(8);
    let init = pretrain(
        &cfg,
        &quick(TrainRecipe::pretrain(), 1),
        &AugmentSpec::pretrain(8),
        &corpus.train,
        &corpus.stats,
        1,
        &mut |_| {},
    )
    .unwrap()
    .params;
    let recipe = TrainRecipe {
        base_lr: 0.0,
        ..quick(TrainRecipe::finetune(), 1)
    };
    let run = train_classifier(&tiny_vit(), Some(&init), &recipe, &AugmentSpec::eval(8), &corpus, 0, &mut |_| {})
        .unwrap();
    let enc = |p: &Params| p.digest(|n| n.starts_with(&format!("{ENCODER}.")));
    assert_eq!(enc(&run.params), init.digest(|n| n.starts_with("encoder.")));
}

#[test]
fn metrics_csv_format() {
    let mut log = MetricsLog::new();
    log.push(3, "train", "loss", 0.123456789);
    log.push(3, "test", "acc", 1.0);
    assert_eq!(log.to_csv(), "epoch,split,metric,value\n3,train,loss,0.123457\n3,test,acc,1\n");
    assert!(MetricsLog::parse_csv("bad header\n").is_err());
    assert_eq!(ChannelStats::identity(3).mean, [0.0; 3]);
}
