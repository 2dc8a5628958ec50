//! Line-oriented `key = value` run configuration covering the model, the
//! training recipe and augmentation.
//!
//! Blank lines and `#` comments are ignored. Every key has a default (the
//! Tiny-desk pre-training setup); unknown or repeated keys are errors.

use std::fmt::Write as _;
use std::path::Path;

use crate::data::{AugmentMode, AugmentSpec};
use crate::error::{Error, Result};
use crate::mae::{MaeConfig, Sampling, TargetKind};
use crate::train::{Freeze, OptimizerKind, TrainRecipe, ADAM_EPS};

/// Every recognised key, in the order [`RunConfig::to_text`] writes them.
pub const KEYS: &[&str] = &[
    "image_size",
    "patch_size",
    "channels",
    "depth",
    "width",
    "heads",
    "mlp_ratio",
    "decoder_depth",
    "decoder_width",
    "decoder_heads",
    "mask_ratio",
    "sampling",
    "target",
    "norm_eps",
    "mask_token_in_encoder",
    "optimizer",
    "base_lr",
    "weight_decay",
    "beta1",
    "beta2",
    "adam_eps",
    "momentum",
    "batch_size",
    "warmup_epochs",
    "epochs",
    "schedule",
    "layer_decay",
    "tuned_blocks",
    "label_smoothing",
    "mixup_alpha",
    "cutmix_alpha",
    "drop_path_rate",
    "ema_decay",
    "epoch_choices",
    "crop",
    "flip",
    "crop_scale_min",
    "crop_scale_max",
    "crop_ratio_min",
    "crop_ratio_max",
];

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub mae: MaeConfig,
    pub recipe: TrainRecipe,
    pub augment: AugmentSpec,
    betas: (f64, f64),
    adam_eps: f64,
    momentum: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::from_parts(MaeConfig::tiny_desk(), desk_pretrain(), AugmentSpec::pretrain(32))
    }
}

/// Pre-training recipe sized for the Tiny-desk model on a few hundred images.
pub fn desk_pretrain() -> TrainRecipe {
    TrainRecipe {
        base_lr: 0.04,
        batch_size: 16,
        warmup_epochs: 10.0,
        epochs: 200,
        ..TrainRecipe::pretrain()
    }
}

/// Fine-tuning recipe for the desk corpus. Mixup, cutmix and drop path are
/// off: with a few hundred images they slow fitting more than they help.
pub fn desk_finetune() -> TrainRecipe {
    TrainRecipe {
        base_lr: 0.04,
        batch_size: 16,
        warmup_epochs: 5.0,
        epochs: 30,
        mixup_alpha: 0.0,
        cutmix_alpha: 0.0,
        drop_path_rate: 0.0,
        ..TrainRecipe::finetune()
    }
}

pub fn desk_partial_finetune(k: usize) -> TrainRecipe {
    TrainRecipe {
        freeze: Freeze::LastBlocks(k),
        epoch_choices: vec![30, 60, 120],
        ..desk_finetune()
    }
}

pub fn desk_linprobe() -> TrainRecipe {
    TrainRecipe {
        base_lr: 1.6,
        batch_size: 16,
        warmup_epochs: 5.0,
        ..TrainRecipe::linprobe()
    }
}

pub fn desk_scratch() -> TrainRecipe {
    TrainRecipe {
        base_lr: 0.04,
        batch_size: 16,
        warmup_epochs: 5.0,
        epochs: 60,
        mixup_alpha: 0.0,
        cutmix_alpha: 0.0,
        drop_path_rate: 0.0,
        ema_decay: 0.99,
        ..TrainRecipe::supervised_scratch()
    }
}

/// Default PCA dimension for a patch of `patch_dim` values.
pub fn default_pca_k(patch_dim: usize) -> usize {
    patch_dim.min(96)
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::invalid(format!("`{key}` expects a number, got `{value}`")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(Error::invalid(format!("`{key}` expects true or false, got `{value}`"))),
    }
}

impl RunConfig {
    pub fn from_parts(mae: MaeConfig, recipe: TrainRecipe, augment: AugmentSpec) -> Self {
        let (betas, adam_eps) = match recipe.optimizer {
            OptimizerKind::AdamW { betas, eps } => (betas, eps),
            _ => ((0.9, 0.999), ADAM_EPS),
        };
        let momentum = match recipe.optimizer {
            OptimizerKind::SgdMomentum { momentum } => momentum,
            _ => 0.9,
        };
        Self {
            mae,
            recipe,
            augment,
            betas,
            adam_eps,
            momentum,
        }
    }

    /// Parses `text` on top of the defaults.
    pub fn parse(text: &str) -> Result<Self> {
        Self::default().merge(text)
    }

    /// Applies the assignments in `text` to `self`.
    pub fn merge(mut self, text: &str) -> Result<Self> {
        let mut seen = std::collections::HashSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line_no = i + 1;
            let err = |msg: String| Error::Config { line: line_no, msg };
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(err(format!("expected `key = value`, got `{line}`")));
            };
            let (key, value) = (key.trim(), value.trim());
            if !seen.insert(key.to_string()) {
                return Err(err(format!("`{key}` is set twice")));
            }
            self.set(key, value).map_err(|e| err(e.to_string()))?;
        }
        self.validate().map_err(|e| Error::Config {
            line: 0,
            msg: e.to_string(),
        })?;
        Ok(self)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.mae.validate()?;
        self.recipe.validate()?;
        self.augment.validate()
    }

    /// Assigns one key. Unknown keys and malformed values are rejected.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let enc = &mut self.mae.encoder;
        let r = &mut self.recipe;
        let a = &mut self.augment;
        match key {
            "image_size" => {
                enc.image_size = parse_num(key, value)?;
                a.out_size = enc.image_size;
            }
            "patch_size" => enc.patch_size = parse_num(key, value)?,
            "channels" => enc.channels = parse_num(key, value)?,
            "depth" => enc.depth = parse_num(key, value)?,
            "width" => enc.width = parse_num(key, value)?,
            "heads" => enc.heads = parse_num(key, value)?,
            "mlp_ratio" => enc.mlp_ratio = parse_num(key, value)?,
            "decoder_depth" => self.mae.decoder_depth = parse_num(key, value)?,
            "decoder_width" => self.mae.decoder_width = parse_num(key, value)?,
            "decoder_heads" => self.mae.decoder_heads = parse_num(key, value)?,
            "mask_ratio" => self.mae.mask_ratio = parse_num(key, value)?,
            "sampling" => self.mae.sampling = Sampling::parse(value)?,
            "target" => self.mae.target = self.parse_target(value)?,
            "norm_eps" => self.mae.norm_eps = parse_num(key, value)?,
            "mask_token_in_encoder" => self.mae.mask_token_in_encoder = parse_bool(key, value)?,
            "optimizer" => {
                r.optimizer = match value {
                    "adamw" => OptimizerKind::AdamW {
                        betas: self.betas,
                        eps: self.adam_eps,
                    },
                    "sgd_momentum" | "sgd" => OptimizerKind::SgdMomentum {
                        momentum: self.momentum,
                    },
                    _ => return Err(Error::invalid(format!("unknown optimizer `{value}`"))),
                }
            }
            "base_lr" => r.base_lr = parse_num(key, value)?,
            "weight_decay" => r.weight_decay = parse_num(key, value)?,
            "beta1" => self.betas.0 = parse_num(key, value)?,
            "beta2" => self.betas.1 = parse_num(key, value)?,
            "adam_eps" => self.adam_eps = parse_num(key, value)?,
            "momentum" => self.momentum = parse_num(key, value)?,
            "batch_size" => r.batch_size = parse_num(key, value)?,
            "warmup_epochs" => r.warmup_epochs = parse_num(key, value)?,
            "epochs" => r.epochs = parse_num(key, value)?,
            "schedule" => {
                if value != "cosine" {
                    return Err(Error::invalid(format!("only the cosine schedule is supported, got `{value}`")));
                }
            }
            "layer_decay" => r.layer_decay = parse_num(key, value)?,
            "tuned_blocks" => {
                r.freeze = match value {
                    "all" => Freeze::None,
                    "mlp" => Freeze::LastMlp,
                    k => Freeze::LastBlocks(parse_num(key, k)?),
                }
            }
            "label_smoothing" => r.label_smoothing = parse_num(key, value)?,
            "mixup_alpha" => r.mixup_alpha = parse_num(key, value)?,
            "cutmix_alpha" => r.cutmix_alpha = parse_num(key, value)?,
            "drop_path_rate" => r.drop_path_rate = parse_num(key, value)?,
            "ema_decay" => r.ema_decay = parse_num(key, value)?,
            "epoch_choices" => {
                r.epoch_choices = value
                    .split(',')
                    .map(str::trim)
                    .filter(|s| !s.is_empty())
                    .map(|s| parse_num(key, s))
                    .collect::<Result<_>>()?
            }
            "crop" => a.mode = AugmentMode::parse(value)?,
            "flip" => a.flip = parse_bool(key, value)?,
            "crop_scale_min" => a.scale_range.0 = parse_num(key, value)?,
            "crop_scale_max" => a.scale_range.1 = parse_num(key, value)?,
            "crop_ratio_min" => a.ratio_range.0 = parse_num(key, value)?,
            "crop_ratio_max" => a.ratio_range.1 = parse_num(key, value)?,
            _ => return Err(Error::invalid(format!("unknown key `{key}`"))),
        }
        self.sync_optimizer();
        Ok(())
    }

    fn sync_optimizer(&mut self) {
        self.recipe.optimizer = match self.recipe.optimizer {
            OptimizerKind::AdamW { .. } => OptimizerKind::AdamW {
                betas: self.betas,
                eps: self.adam_eps,
            },
            OptimizerKind::SgdMomentum { .. } => OptimizerKind::SgdMomentum {
                momentum: self.momentum,
            },
        };
    }

    fn parse_target(&self, value: &str) -> Result<TargetKind> {
        match value.split_once(':') {
            None => match value {
                "pixels" => Ok(TargetKind::RawPixels),
                "normalized_pixels" | "norm_pixels" => Ok(TargetKind::NormalizedPixels),
                "pca" => Ok(TargetKind::Pca(default_pca_k(self.mae.encoder.patch_dim()))),
                _ => Err(Error::invalid(format!("unknown target `{value}`"))),
            },
            Some(("pca", k)) => Ok(TargetKind::Pca(parse_num("target", k)?)),
            _ => Err(Error::invalid(format!("unknown target `{value}`"))),
        }
    }

    /// Current value of `key` in the syntax [`RunConfig::set`] accepts.
    pub fn get(&self, key: &str) -> Result<String> {
        let enc = &self.mae.encoder;
        let r = &self.recipe;
        let a = &self.augment;
        Ok(match key {
            "image_size" => enc.image_size.to_string(),
            "patch_size" => enc.patch_size.to_string(),
            "channels" => enc.channels.to_string(),
            "depth" => enc.depth.to_string(),
            "width" => enc.width.to_string(),
            "heads" => enc.heads.to_string(),
            "mlp_ratio" => enc.mlp_ratio.to_string(),
            "decoder_depth" => self.mae.decoder_depth.to_string(),
            "decoder_width" => self.mae.decoder_width.to_string(),
            "decoder_heads" => self.mae.decoder_heads.to_string(),
            "mask_ratio" => self.mae.mask_ratio.to_string(),
            "sampling" => self.mae.sampling.name().to_string(),
            "target" => match self.mae.target {
                TargetKind::RawPixels => "pixels".into(),
                TargetKind::NormalizedPixels => "normalized_pixels".into(),
                TargetKind::Pca(k) => format!("pca:{k}"),
            },
            "norm_eps" => self.mae.norm_eps.to_string(),
            "mask_token_in_encoder" => self.mae.mask_token_in_encoder.to_string(),
            "optimizer" => r.optimizer.name().to_string(),
            "base_lr" => r.base_lr.to_string(),
            "weight_decay" => r.weight_decay.to_string(),
            "beta1" => self.betas.0.to_string(),
            "beta2" => self.betas.1.to_string(),
            "adam_eps" => self.adam_eps.to_string(),
            "momentum" => self.momentum.to_string(),
            "batch_size" => r.batch_size.to_string(),
            "warmup_epochs" => r.warmup_epochs.to_string(),
            "epochs" => r.epochs.to_string(),
            "schedule" => "cosine".into(),
            "layer_decay" => r.layer_decay.to_string(),
            "tuned_blocks" => match r.freeze {
                Freeze::None => "all".into(),
                Freeze::LastMlp => "mlp".into(),
                Freeze::LastBlocks(k) => k.to_string(),
            },
            "label_smoothing" => r.label_smoothing.to_string(),
            "mixup_alpha" => r.mixup_alpha.to_string(),
            "cutmix_alpha" => r.cutmix_alpha.to_string(),
            "drop_path_rate" => r.drop_path_rate.to_string(),
            "ema_decay" => r.ema_decay.to_string(),
            "epoch_choices" => r.epoch_choices.iter().map(|e| e.to_string()).collect::<Vec<_>>().join(","),
            "crop" => a.mode.name().to_string(),
            "flip" => a.flip.to_string(),
            "crop_scale_min" => a.scale_range.0.to_string(),
            "crop_scale_max" => a.scale_range.1.to_string(),
            "crop_ratio_min" => a.ratio_range.0.to_string(),
            "crop_ratio_max" => a.ratio_range.1.to_string(),
            _ => return Err(Error::invalid(format!("unknown key `{key}`"))),
        })
    }

    /// Every key with its current value; [`RunConfig::parse`] inverts it.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for key in KEYS {
            let _ = writeln!(s, "{key} = {}", self.get(key).expect("listed key"));
        }
        s
    }
}
