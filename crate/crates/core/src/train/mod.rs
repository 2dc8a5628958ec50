//! Training recipes, optimizers and the evaluation protocols (pre-training,
//! fine-tuning, linear probing, partial fine-tuning, supervised training from
//! scratch).

mod metrics;
mod mix;
mod optim;
mod probe;
mod protocol;

use crate::error::{Error, Result};

pub use metrics::{format_g6, MetricsLog, Record, METRICS_HEADER};
pub use mix::{apply_mix, cutmix_box, mixup_cutmix, smooth_targets, Mix};
pub use optim::{
    adamw_update, decays, effective_lr, ema_update, freeze_prefix, layer_id, layer_scale, layerwise_groups, lr_at,
    sgd_update, Freeze, Optimizer, OptimizerKind, ParamGroup,
};
pub use probe::{accuracy, argmax_rows, BatchNorm, FoldedProbe, ProbeHead, PROBE_BN_EPS, PROBE_BN_MOMENTUM};
pub use protocol::{
    check_depth, evaluate_classifier, extract_features, fit_probe, linear_probe, pretrain, run_protocol, stored_basis,
    train_classifier, ClassifierRun, Corpus, PretrainRun, ProbeRun, Protocol, ProtocolOutcome, Reporter,
};

pub const ADAM_EPS: f64 = 1e-8;

/// Hyper-parameters of one training run.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainRecipe {
    pub optimizer: OptimizerKind,
    pub base_lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub warmup_epochs: f64,
    pub epochs: usize,
    pub layer_decay: f64,
    pub freeze: Freeze,
    pub label_smoothing: f64,
    pub mixup_alpha: f64,
    pub cutmix_alpha: f64,
    pub drop_path_rate: f64,
    /// 0 disables the moving average.
    pub ema_decay: f64,
    /// Candidate schedule lengths for partial fine-tuning.
    pub epoch_choices: Vec<usize>,
}

impl TrainRecipe {
    /// MAE pre-training: AdamW, base lr 1.5e-4, wd 0.05, β = (0.9, 0.95),
    /// batch 4096, 40 warmup epochs, 800 epochs.
    pub fn pretrain() -> Self {
        Self {
            optimizer: OptimizerKind::AdamW {
                betas: (0.9, 0.95),
                eps: ADAM_EPS,
            },
            base_lr: 1.5e-4,
            weight_decay: 0.05,
            batch_size: 4096,
            warmup_epochs: 40.0,
            epochs: 800,
            layer_decay: 1.0,
            freeze: Freeze::None,
            label_smoothing: 0.0,
            mixup_alpha: 0.0,
            cutmix_alpha: 0.0,
            drop_path_rate: 0.0,
            ema_decay: 0.0,
            epoch_choices: Vec::new(),
        }
    }

    /// End-to-end fine-tuning of ViT-L: AdamW, base lr 1e-3, wd 0.05,
    /// β = (0.9, 0.999), layer decay 0.75, batch 1024, 5 warmup epochs,
    /// 50 epochs, label smoothing 0.1, mixup 0.8, cutmix 1.0, drop path 0.1.
    pub fn finetune() -> Self {
        Self {
            optimizer: OptimizerKind::AdamW {
                betas: (0.9, 0.999),
                eps: ADAM_EPS,
            },
            base_lr: 1e-3,
            weight_decay: 0.05,
            batch_size: 1024,
            warmup_epochs: 5.0,
            epochs: 50,
            layer_decay: 0.75,
            label_smoothing: 0.1,
            mixup_alpha: 0.8,
            cutmix_alpha: 1.0,
            drop_path_rate: 0.1,
            ..Self::pretrain()
        }
    }

    /// Linear probing: SGD with momentum 0.9, base lr 0.1, no weight decay,
    /// batch 16384, 10 warmup epochs, 90 epochs.
    pub fn linprobe() -> Self {
        Self {
            optimizer: OptimizerKind::SgdMomentum { momentum: 0.9 },
            base_lr: 0.1,
            weight_decay: 0.0,
            batch_size: 16384,
            warmup_epochs: 10.0,
            epochs: 90,
            freeze: Freeze::LastBlocks(0),
            ..Self::pretrain()
        }
    }

    /// Fine-tuning settings with the last `k` blocks unfrozen and a schedule
    /// picked from {50, 100, 200} epochs.
    pub fn partial_finetune(k: usize) -> Self {
        Self {
            freeze: Freeze::LastBlocks(k),
            epoch_choices: vec![50, 100, 200],
            ..Self::finetune()
        }
    }

    /// Supervised ViT-L from scratch: AdamW, base lr 1e-4, wd 0.3,
    /// β = (0.9, 0.95), batch 4096, 20 warmup epochs, 200 epochs, label
    /// smoothing 0.1, mixup 0.8, cutmix 1.0, drop path 0.2, EMA 0.9999.
    pub fn supervised_scratch() -> Self {
        Self {
            optimizer: OptimizerKind::AdamW {
                betas: (0.9, 0.95),
                eps: ADAM_EPS,
            },
            base_lr: 1e-4,
            weight_decay: 0.3,
            batch_size: 4096,
            warmup_epochs: 20.0,
            epochs: 200,
            layer_decay: 1.0,
            label_smoothing: 0.1,
            mixup_alpha: 0.8,
            cutmix_alpha: 1.0,
            drop_path_rate: 0.2,
            ema_decay: 0.9999,
            ..Self::pretrain()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::invalid(msg));
        if self.batch_size == 0 {
            return bad("batch size must be at least 1".into());
        }
        if self.epochs == 0 {
            return bad("training needs at least one epoch".into());
        }
        if !(0.0..=self.epochs as f64).contains(&self.warmup_epochs) {
            return bad(format!(
                "warmup of {} epochs does not fit a {}-epoch schedule",
                self.warmup_epochs, self.epochs
            ));
        }
        if !(self.layer_decay > 0.0 && self.layer_decay <= 1.0) {
            return bad(format!("layer decay {} outside (0, 1]", self.layer_decay));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return bad(format!("label smoothing {} outside [0, 1)", self.label_smoothing));
        }
        if !(0.0..1.0).contains(&self.drop_path_rate) {
            return bad(format!("drop path rate {} outside [0, 1)", self.drop_path_rate));
        }
        if !(0.0..=1.0).contains(&self.ema_decay) {
            return bad(format!("EMA decay {} outside [0, 1]", self.ema_decay));
        }
        if self.base_lr < 0.0 || self.weight_decay < 0.0 || self.mixup_alpha < 0.0 || self.cutmix_alpha < 0.0 {
            return bad("learning rate, weight decay and mixing strengths must be non-negative".into());
        }
        Ok(())
    }

    pub fn peak_lr(&self) -> f64 {
        effective_lr(self.base_lr, self.batch_size)
    }
}
