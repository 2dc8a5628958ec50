use std::path::PathBuf;

use mae_core::config::{
    desk_finetune, desk_linprobe, desk_partial_finetune, desk_pretrain, desk_scratch, RunConfig, KEYS,
};
use mae_core::data::{AugmentMode, AugmentSpec};
use mae_core::mae::{MaeConfig, Sampling, TargetKind};
use mae_core::train::{effective_lr, Freeze, OptimizerKind, TrainRecipe};
use mae_core::Error;
use proptest::prelude::*;

fn config(name: &str) -> RunConfig {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("configs").join(name);
    RunConfig::load(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

fn betas(r: &TrainRecipe) -> (f64, f64) {
    match r.optimizer {
        OptimizerKind::AdamW { betas, .. } => betas,
        other => panic!("expected AdamW, got {other:?}"),
    }
}

#[test]
fn large_pretrain_file() {
    let c = config("large/pretrain.cfg");
    assert_eq!(c.mae, MaeConfig::large());
    assert_eq!(c.mae.encoder.n_patches(), 196);
    assert_eq!((c.mae.decoder_depth, c.mae.decoder_width), (8, 512));
    assert_eq!(c.mae.mask_ratio, 0.75);
    assert_eq!(c.mae.sampling, Sampling::Random);
    assert_eq!(c.mae.target, TargetKind::RawPixels);
    let r = &c.recipe;
    assert_eq!(r.base_lr, 1.5e-4);
    assert_eq!(r.weight_decay, 0.05);
    assert_eq!(betas(r), (0.9, 0.95));
    assert_eq!(r.batch_size, 4096);
    assert_eq!(r.warmup_epochs, 40.0);
    assert_eq!(r.epochs, 800);
    assert_eq!(c.augment.mode, AugmentMode::RandomSizeCrop);
    assert_eq!(*r, TrainRecipe::pretrain());
}

#[test]
fn large_finetune_file() {
    let c = config("large/finetune.cfg");
    let r = &c.recipe;
    assert_eq!(r.base_lr, 1e-3);
    assert_eq!(r.weight_decay, 0.05);
    assert_eq!(betas(r), (0.9, 0.999));
    assert_eq!(r.layer_decay, 0.75);
    assert_eq!(r.batch_size, 1024);
    assert_eq!(r.warmup_epochs, 5.0);
    assert_eq!(r.epochs, 50);
    assert_eq!((r.label_smoothing, r.mixup_alpha, r.cutmix_alpha), (0.1, 0.8, 1.0));
    assert_eq!(r.drop_path_rate, 0.1);
    assert_eq!(r.freeze, Freeze::None);
    assert_eq!(*r, TrainRecipe::finetune());
}

#[test]
fn large_linprobe_file() {
    let c = config("large/linprobe.cfg");
    let r = &c.recipe;
    assert_eq!(r.optimizer, OptimizerKind::SgdMomentum { momentum: 0.9 });
    assert_eq!(r.base_lr, 0.1);
    assert_eq!(r.weight_decay, 0.0);
    assert_eq!(r.batch_size, 16384);
    assert_eq!(r.warmup_epochs, 10.0);
    assert_eq!(r.epochs, 90);
    assert_eq!(r.freeze, Freeze::LastBlocks(0));
    assert_eq!(*r, TrainRecipe::linprobe());
}

#[test]
fn large_partial_and_scratch_files() {
    let c = config("large/partialft.cfg");
    assert_eq!(c.recipe.epoch_choices, vec![50, 100, 200]);
    assert_eq!(c.recipe, TrainRecipe::partial_finetune(1));

    let c = config("large/scratch.cfg");
    let r = &c.recipe;
    assert_eq!(r.base_lr, 1e-4);
    assert_eq!(r.weight_decay, 0.3);
    assert_eq!(betas(r), (0.9, 0.95));
    assert_eq!(r.batch_size, 4096);
    assert_eq!(r.warmup_epochs, 20.0);
    assert_eq!(r.epochs, 200);
    assert_eq!(r.drop_path_rate, 0.2);
    assert_eq!(r.ema_decay, 0.9999);
    assert_eq!(*r, TrainRecipe::supervised_scratch());
}

#[test]
fn tiny_files_match_presets() {
    let tiny = MaeConfig::tiny_desk();
    for (name, recipe, aug) in [
        ("tiny/pretrain.cfg", desk_pretrain(), AugmentSpec::pretrain(32)),
        ("tiny/finetune.cfg", desk_finetune(), AugmentSpec::eval(32)),
        ("tiny/partialft.cfg", desk_partial_finetune(1), AugmentSpec::eval(32)),
        ("tiny/linprobe.cfg", desk_linprobe(), AugmentSpec::eval(32)),
        ("tiny/scratch.cfg", desk_scratch(), AugmentSpec::eval(32)),
    ] {
        let c = config(name);
        assert_eq!(c.mae, tiny, "{name}");
        assert_eq!(c.recipe, recipe, "{name}");
        assert_eq!(c.augment, aug, "{name}");
    }
    assert_eq!(config("tiny/pretrain.cfg"), RunConfig::default());
}

#[test]
fn every_file_round_trips_through_text() {
    for name in ["pretrain", "finetune", "linprobe", "partialft", "scratch"] {
        for size in ["large", "tiny"] {
            let c = config(&format!("{size}/{name}.cfg"));
            assert_eq!(RunConfig::parse(&c.to_text()).unwrap(), c, "{size}/{name}");
        }
    }
}

#[test]
fn pretrain_batch_scales_the_learning_rate() {
    assert!((effective_lr(1.5e-4, 4096) - 2.4e-3).abs() < 1e-15);
    assert!((TrainRecipe::pretrain().peak_lr() - 2.4e-3).abs() < 1e-15);
    assert!((TrainRecipe::finetune().peak_lr() - 4e-3).abs() < 1e-15);
}

#[test]
fn defaults_are_desk_scaled() {
    let c = RunConfig::default();
    assert_eq!(c.mae.mask_ratio, 0.75);
    assert_eq!(c.mae.sampling, Sampling::Random);
    assert_eq!(c.mae.target, TargetKind::RawPixels);
    assert!(c.mae.decoder_depth < c.mae.encoder.depth);
    assert_eq!(c.to_text().lines().count(), KEYS.len());
}

#[test]
fn config_errors() {
    assert!(matches!(RunConfig::parse("mask_ratio = 1.5"), Err(Error::Config { line: 0, .. })));
    assert!(matches!(RunConfig::parse("heads = 3"), Err(Error::Config { line: 0, .. })));
    assert!(matches!(RunConfig::parse("\n\nschedule = step"), Err(Error::Config { line: 3, .. })));
    assert!(matches!(RunConfig::parse("target = dvae"), Err(Error::Config { line: 1, .. })));
    assert!(matches!(RunConfig::parse("tuned_blocks = some"), Err(Error::Config { line: 1, .. })));
    assert!(RunConfig::parse("crop = random  # trailing comment").is_ok());
}

#[test]
fn targets_and_tuned_blocks_parse() {
    let c = RunConfig::parse("target = pca").unwrap();
    assert_eq!(c.mae.target, TargetKind::Pca(48));
    let c = RunConfig::parse("target = pca:12\ntuned_blocks = mlp").unwrap();
    assert_eq!(c.mae.target, TargetKind::Pca(12));
    assert_eq!(c.recipe.freeze, Freeze::LastMlp);
    let c = RunConfig::parse("target = norm_pixels\ntuned_blocks = 3").unwrap();
    assert_eq!(c.mae.target, TargetKind::NormalizedPixels);
    assert_eq!(c.recipe.freeze, Freeze::LastBlocks(3));
}

proptest! {
    #[test]
    fn set_then_get_round_trips(
        ratio in 0.0f64..0.95,
        lr in 1e-6f64..1.0,
        epochs in 1usize..1000,
        warm in 0usize..10,
        depth in 1usize..4,
    ) {
        let mut c = RunConfig::default();
        c.set("mask_ratio", &ratio.to_string()).unwrap();
        c.set("base_lr", &lr.to_string()).unwrap();
        c.set("epochs", &(epochs + 10).to_string()).unwrap();
        c.set("warmup_epochs", &warm.to_string()).unwrap();
        c.set("decoder_depth", &depth.to_string()).unwrap();
        prop_assert_eq!(c.mae.mask_ratio, ratio);
        prop_assert_eq!(c.recipe.base_lr, lr);
        let back = RunConfig::parse(&c.to_text()).unwrap();
        prop_assert_eq!(back, c);
    }
}
