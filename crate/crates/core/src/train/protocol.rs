//! Training loops for pre-training and the classifier protocols.

use std::collections::HashMap;

use crate::data::{batch_indices, make_batch, AugmentMode, AugmentSpec, ChannelStats, PackedDataset};
use crate::error::{Error, Result};
use crate::mae::{init_mae, mae_forward, pca_fit, MaeConfig, PcaBasis, TargetKind};
use crate::rng::{self, Domain};
use crate::tensor::{Tape, Tensor, Var};
use crate::vit::{class_token, encode_tokens, init_classifier, normal, patchify, vit_classify, Params, ViTConfig, ENCODER};

use super::metrics::{MetricsLog, Record};
use super::mix::{check_classes, mixup_cutmix, smooth_targets};
use super::optim::{ema_update, layerwise_groups, lr_at, Freeze, Optimizer, OptimizerKind, ParamGroup};
use super::probe::{accuracy, argmax_rows, BatchNorm, ProbeHead};
use super::TrainRecipe;

/// Receives every metric record as it is produced.
pub type Reporter<'a> = &'a mut dyn FnMut(&Record);

/// Training split, optional held-out split, and the channel statistics used
/// to standardize both.
#[derive(Debug, Clone)]
pub struct Corpus {
    pub train: PackedDataset,
    pub test: Option<PackedDataset>,
    pub stats: ChannelStats,
}

impl Corpus {
    pub fn new(train: PackedDataset, test: Option<PackedDataset>) -> Self {
        let stats = ChannelStats::compute(&train);
        Self { train, test, stats }
    }

    /// Images are evaluated on the held-out split when present, else on the
    /// training split.
    pub fn eval_split(&self) -> &PackedDataset {
        self.test.as_ref().unwrap_or(&self.train)
    }

    pub fn n_classes(&self) -> usize {
        self.train.n_classes
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Protocol {
    Pretrain,
    Finetune,
    Linprobe,
    PartialFt,
    SupervisedScratch,
}

impl Protocol {
    pub fn name(&self) -> &'static str {
        match self {
            Protocol::Pretrain => "pretrain",
            Protocol::Finetune => "finetune",
            Protocol::Linprobe => "linprobe",
            Protocol::PartialFt => "partial_ft",
            Protocol::SupervisedScratch => "supervised_scratch",
        }
    }
}

#[derive(Debug, Clone)]
pub struct PretrainRun {
    pub params: Params,
    pub basis: Option<PcaBasis>,
    pub log: MetricsLog,
}

#[derive(Debug, Clone)]
pub struct ClassifierRun {
    pub params: Params,
    pub ema: Option<Params>,
    pub log: MetricsLog,
    pub test_acc: f64,
}

#[derive(Debug, Clone)]
pub struct ProbeRun {
    pub head: ProbeHead,
    pub log: MetricsLog,
    pub test_acc: f64,
}

#[derive(Debug, Clone)]
pub enum ProtocolOutcome {
    Pretrain(PretrainRun),
    Classifier(ClassifierRun),
    Probe(ProbeRun),
}

impl ProtocolOutcome {
    pub fn log(&self) -> &MetricsLog {
        match self {
            ProtocolOutcome::Pretrain(r) => &r.log,
            ProtocolOutcome::Classifier(r) => &r.log,
            ProtocolOutcome::Probe(r) => &r.log,
        }
    }
}

fn emit(log: &mut MetricsLog, report: &mut Reporter<'_>, epoch: usize, split: &str, metric: &str, value: f64) {
    let rec = log.push(epoch, split, metric, value);
    report(rec);
}

fn check_fit(ds: &PackedDataset, vit: &ViTConfig, aug: &AugmentSpec) -> Result<()> {
    if ds.channels != vit.channels {
        return Err(Error::Data(format!(
            "dataset has {} channels, the model expects {}",
            ds.channels, vit.channels
        )));
    }
    if aug.out_size != vit.image_size {
        return Err(Error::invalid(format!(
            "augmentation produces {}px crops, the model expects {}px images",
            aug.out_size, vit.image_size
        )));
    }
    if ds.is_empty() {
        return Err(Error::Data("dataset is empty".into()));
    }
    Ok(())
}

/// Step counts of a schedule over `n` samples.
struct Schedule {
    warmup: usize,
    total: usize,
    peak: f64,
}

impl Schedule {
    fn new(recipe: &TrainRecipe, n: usize) -> Self {
        let per_epoch = n.div_ceil(recipe.batch_size);
        Self {
            warmup: (recipe.warmup_epochs * per_epoch as f64).round() as usize,
            total: recipe.epochs * per_epoch,
            peak: recipe.peak_lr(),
        }
    }

    fn lr(&self, step: usize) -> Result<f64> {
        lr_at(step, self.warmup, self.total, self.peak)
    }
}

/// PCA basis of the (center-cropped, standardized) training patches.
fn fit_basis(cfg: &MaeConfig, ds: &PackedDataset, stats: &ChannelStats) -> Result<Option<PcaBasis>> {
    let TargetKind::Pca(k) = cfg.target else { return Ok(None) };
    let spec = AugmentSpec::eval(cfg.encoder.image_size);
    let all: Vec<usize> = (0..ds.len()).collect();
    let images = make_batch(ds, &all, &spec, stats, 0, 0)?.images;
    let patches = patchify(&images.cast::<f64>(), cfg.encoder.patch_size)?;
    let d = cfg.encoder.patch_dim();
    let m = patches.len() / d;
    let rows = patches.reshape(&[m, d])?;
    pca_fit(&rows, k).map(Some)
}

/// MAE pre-training with AdamW and a warmup + cosine schedule. Logs the mean
/// masked reconstruction loss and final learning rate of every epoch.
pub fn pretrain(
    cfg: &MaeConfig,
    recipe: &TrainRecipe,
    aug: &AugmentSpec,
    ds: &PackedDataset,
    stats: &ChannelStats,
    seed: u64,
    report: Reporter<'_>,
) -> Result<PretrainRun> {
    cfg.validate()?;
    recipe.validate()?;
    aug.validate()?;
    check_fit(ds, &cfg.encoder, aug)?;
    let mut report = report;
    let mut log = MetricsLog::new();
    let n = cfg.encoder.n_patches();
    let keep = crate::mae::len_keep(n, cfg.effective_mask_ratio());
    emit(&mut log, &mut report, 0, "config", "len_keep", keep as f64);

    let mut params: Params = init_mae(cfg, &mut rng::keyed(seed, Domain::Init, &[0]));
    let basis = fit_basis(cfg, ds, stats)?;
    let groups = layerwise_groups(&params, |_| true, cfg.encoder.depth, 1.0);
    let mut opt = Optimizer::new(recipe.optimizer, recipe.weight_decay, groups);
    let sched = Schedule::new(recipe, ds.len());

    let mut step = 0;
    for epoch in 0..recipe.epochs {
        let (mut total, mut count, mut lr) = (0.0, 0usize, 0.0);
        for (b, idx) in batch_indices(ds.len(), recipe.batch_size, seed, epoch as u64)
            .into_iter()
            .enumerate()
        {
            let batch = make_batch(ds, &idx, aug, stats, seed, epoch as u64)?;
            let keys: Vec<[u64; 2]> = idx.iter().map(|&i| [epoch as u64, i as u64]).collect();
            let plans = cfg.sample_plans(seed, &keys)?;
            let tape = Tape::new();
            let bound = params.bind(&tape, |_| true);
            let out = mae_forward(&batch.images, plans, &bound, cfg, basis.as_ref())?;
            let loss = out.loss.value().item() as f64;
            if !loss.is_finite() {
                return Err(Error::invalid(format!("loss diverged at epoch {} batch {b}", epoch + 1)));
            }
            let grads = bound.gradients(&tape.backward(out.loss)?);
            lr = sched.lr(step)?;
            opt.step(&mut params, &grads, lr)?;
            step += 1;
            total += loss * idx.len() as f64;
            count += idx.len();
        }
        emit(&mut log, &mut report, epoch + 1, "train", "loss", total / count as f64);
        emit(&mut log, &mut report, epoch + 1, "train", "lr", lr);
    }
    if let Some(b) = &basis {
        params.insert("pca.mean", b.mean.cast());
        params.insert("pca.components", b.components.cast());
    }
    Ok(PretrainRun { params, basis, log })
}

/// Reads a PCA basis stored alongside pre-trained weights.
pub fn stored_basis(params: &Params) -> Option<PcaBasis> {
    let mean = params.get("pca.mean")?.cast::<f64>();
    let components = params.get("pca.components")?.cast::<f64>();
    Some(PcaBasis {
        mean,
        components,
        explained: Vec::new(),
    })
}

/// Top-1 accuracy of a classifier over `ds` with deterministic `spec`.
pub fn evaluate_classifier(
    params: &Params,
    cfg: &ViTConfig,
    ds: &PackedDataset,
    spec: &AugmentSpec,
    stats: &ChannelStats,
    batch_size: usize,
) -> Result<f64> {
    let mut hits = 0usize;
    let all: Vec<usize> = (0..ds.len()).collect();
    for idx in all.chunks(batch_size.max(1)) {
        let batch = make_batch(ds, idx, spec, stats, 0, 0)?;
        let tape = Tape::new();
        let bound = params.bind(&tape, |_| false);
        let logits = vit_classify(&batch.images, &bound, cfg, 0.0, None)?;
        let pred = argmax_rows(&logits.value());
        hits += pred.iter().zip(&batch.labels).filter(|(&p, &l)| p == l as usize).count();
    }
    Ok(if ds.is_empty() { 0.0 } else { hits as f64 / ds.len() as f64 })
}

fn init_classifier_from(cfg: &ViTConfig, n_classes: usize, init: Option<&Params>, seed: u64) -> Result<Params> {
    let mut params: Params = init_classifier(cfg, n_classes, &mut rng::keyed(seed, Domain::Init, &[1]));
    if let Some(src) = init {
        let loaded = params.load_prefix(src, &format!("{ENCODER}."))?;
        if loaded == 0 {
            return Err(Error::Data("checkpoint holds no encoder weights".into()));
        }
    }
    Ok(params)
}

/// Fine-tuning, partial fine-tuning or supervised training of a ViT
/// classifier. `init` supplies encoder weights; `None` trains from scratch.
/// Logs training loss and held-out accuracy per epoch (of the EMA weights
/// when the recipe keeps an average).
#[allow(clippy::too_many_arguments)]
pub fn train_classifier(
    cfg: &ViTConfig,
    init: Option<&Params>,
    recipe: &TrainRecipe,
    aug: &AugmentSpec,
    corpus: &Corpus,
    seed: u64,
    report: Reporter<'_>,
) -> Result<ClassifierRun> {
    cfg.validate()?;
    recipe.validate()?;
    aug.validate()?;
    let ds = &corpus.train;
    check_fit(ds, cfg, aug)?;
    let k = corpus.n_classes();
    check_classes(corpus.eval_split(), k)?;
    if let Freeze::LastBlocks(b) = recipe.freeze {
        if b > cfg.depth {
            return Err(Error::invalid(format!("cannot tune {b} blocks of a {}-block encoder", cfg.depth)));
        }
    }
    let mut report = report;
    let mut log = MetricsLog::new();
    let mut params = init_classifier_from(cfg, k, init, seed)?;
    let trainable = |name: &str| recipe.freeze.trainable(name, cfg.depth);
    let groups = layerwise_groups(&params, trainable, cfg.depth, recipe.layer_decay);
    let mut opt = Optimizer::new(recipe.optimizer, recipe.weight_decay, groups);
    let mut ema = (recipe.ema_decay > 0.0).then(|| params.clone());
    let sched = Schedule::new(recipe, ds.len());
    let eval_spec = AugmentSpec::eval(cfg.image_size);

    let mut step = 0;
    let mut test_acc = 0.0;
    for epoch in 0..recipe.epochs {
        let e = epoch as u64;
        let (mut total, mut count) = (0.0, 0usize);
        for (b, idx) in batch_indices(ds.len(), recipe.batch_size, seed, e).into_iter().enumerate() {
            let mut batch = make_batch(ds, &idx, aug, &corpus.stats, seed, e)?;
            let mut targets = smooth_targets(&batch.labels, k, recipe.label_smoothing);
            let mut mix_rng = rng::keyed(seed, Domain::Mix, &[e, b as u64]);
            mixup_cutmix(
                &mut batch.images,
                &mut targets,
                recipe.mixup_alpha,
                recipe.cutmix_alpha,
                &mut mix_rng,
            )?;
            let mut drop_rng = rng::keyed(seed, Domain::DropPath, &[e, b as u64]);
            let tape = Tape::new();
            let bound = params.bind(&tape, trainable);
            let logits = vit_classify(&batch.images, &bound, cfg, recipe.drop_path_rate, Some(&mut drop_rng))?;
            let loss = logits.soft_cross_entropy(targets)?;
            let value = loss.value().item() as f64;
            if !value.is_finite() {
                return Err(Error::invalid(format!("loss diverged at epoch {} batch {b}", epoch + 1)));
            }
            let grads = bound.gradients(&tape.backward(loss)?);
            opt.step(&mut params, &grads, sched.lr(step)?)?;
            if let Some(ema) = ema.as_mut() {
                ema_update(ema, &params, recipe.ema_decay)?;
            }
            step += 1;
            total += value * idx.len() as f64;
            count += idx.len();
        }
        emit(&mut log, &mut report, epoch + 1, "train", "loss", total / count as f64);
        let model = ema.as_ref().unwrap_or(&params);
        test_acc = evaluate_classifier(
            model,
            cfg,
            corpus.eval_split(),
            &eval_spec,
            &corpus.stats,
            recipe.batch_size,
        )?;
        emit(&mut log, &mut report, epoch + 1, "test", "acc", test_acc);
    }
    Ok(ClassifierRun {
        params,
        ema,
        log,
        test_acc,
    })
}

/// Class-token features `[n, d]` (after the final encoder norm) of the
/// images `idx` of `ds`.
pub fn extract_features(
    encoder: &Params,
    cfg: &ViTConfig,
    ds: &PackedDataset,
    idx: &[usize],
    spec: &AugmentSpec,
    stats: &ChannelStats,
    seed: u64,
    epoch: u64,
) -> Result<Tensor<f32>> {
    let mut out = Vec::with_capacity(idx.len() * cfg.width);
    for chunk in idx.chunks(256) {
        let batch = make_batch(ds, chunk, spec, stats, seed, epoch)?;
        let tape = Tape::new();
        let bound = encoder.bind(&tape, |_| false);
        let patches = tape.constant(patchify(&batch.images, cfg.patch_size)?);
        let feats = class_token(encode_tokens(patches, &bound, cfg, 0.0, None)?)?;
        out.extend_from_slice(feats.value().data());
    }
    Tensor::new(vec![idx.len(), cfg.width], out)
}

fn deterministic(spec: &AugmentSpec) -> bool {
    spec.mode == AugmentMode::CenterCrop && !spec.flip
}

const PROBE_W: &str = "head.weight";
const PROBE_B: &str = "head.bias";

/// Linear probe on a frozen encoder: affine-free batch norm and a linear
/// classifier, trained with the recipe's optimizer (SGD with momentum by
/// default). Features are computed once when `aug` is deterministic.
#[allow(clippy::too_many_arguments)]
pub fn linear_probe(
    cfg: &ViTConfig,
    encoder: &Params,
    recipe: &TrainRecipe,
    aug: &AugmentSpec,
    corpus: &Corpus,
    seed: u64,
    report: Reporter<'_>,
) -> Result<ProbeRun> {
    cfg.validate()?;
    aug.validate()?;
    let ds = &corpus.train;
    check_fit(ds, cfg, aug)?;
    check_classes(corpus.eval_split(), corpus.n_classes())?;
    let all: Vec<usize> = (0..ds.len()).collect();
    let cached = if deterministic(aug) {
        Some(extract_features(encoder, cfg, ds, &all, aug, &corpus.stats, seed, 0)?)
    } else {
        None
    };
    let eval_ds = corpus.eval_split();
    let eval_idx: Vec<usize> = (0..eval_ds.len()).collect();
    let eval_spec = AugmentSpec::eval(cfg.image_size);
    let eval_feats = extract_features(encoder, cfg, eval_ds, &eval_idx, &eval_spec, &corpus.stats, seed, 0)?;
    let features = |epoch: u64, idx: &[usize]| match &cached {
        Some(f) => f.gather_rows(idx),
        None => extract_features(encoder, cfg, ds, idx, aug, &corpus.stats, seed, epoch),
    };
    fit_probe(
        features,
        ds.labels(),
        &eval_feats,
        eval_ds.labels(),
        corpus.n_classes(),
        recipe,
        seed,
        report,
    )
}

/// Trains the probe head. `features(epoch, idx)` yields the `[len, d]`
/// training features of samples `idx`; `labels` covers every sample.
#[allow(clippy::too_many_arguments)]
pub fn fit_probe(
    mut features: impl FnMut(u64, &[usize]) -> Result<Tensor<f32>>,
    labels: &[u32],
    eval_features: &Tensor<f32>,
    eval_labels: &[u32],
    n_classes: usize,
    recipe: &TrainRecipe,
    seed: u64,
    report: Reporter<'_>,
) -> Result<ProbeRun> {
    recipe.validate()?;
    let k = n_classes;
    let d = eval_features.shape().get(1).copied().unwrap_or(0);
    if let Some(&bad) = labels.iter().chain(eval_labels).find(|&&l| l as usize >= k) {
        return Err(Error::Data(format!("label {bad} outside {k} classes")));
    }
    if labels.is_empty() {
        return Err(Error::Data("no training samples for the probe".into()));
    }
    let mut report = report;
    let mut log = MetricsLog::new();
    let mut head: Params<f64> = Params::new();
    let mut init_rng = rng::keyed(seed, Domain::Init, &[2]);
    head.insert(PROBE_W, normal(&[d, k], 0.01, &mut init_rng));
    head.insert(PROBE_B, Tensor::zeros(&[k]));
    let mut norm = BatchNorm::new(d);
    let groups = vec![ParamGroup {
        names: vec![PROBE_W.into(), PROBE_B.into()],
        lr_scale: 1.0,
        weight_decay: true,
    }];
    let mut opt: Optimizer<f64> = Optimizer::new(recipe.optimizer, recipe.weight_decay, groups);
    let sched = Schedule::new(recipe, labels.len());
    let snapshot = |norm: &BatchNorm, head: &Params<f64>| -> Result<ProbeHead> {
        Ok(ProbeHead {
            norm: norm.clone(),
            weight: head.require(PROBE_W)?.clone(),
            bias: head.require(PROBE_B)?.clone(),
        })
    };

    let mut step = 0;
    let mut test_acc = 0.0;
    let mut probe = snapshot(&norm, &head)?;
    for epoch in 0..recipe.epochs {
        let e = epoch as u64;
        let (mut total, mut count) = (0.0, 0usize);
        for idx in batch_indices(labels.len(), recipe.batch_size, seed, e) {
            let feats = features(e, &idx)?;
            if feats.shape() != [idx.len(), d] {
                return Err(Error::shape("probe features", feats.shape(), &[idx.len(), d]));
            }
            let x = norm.train_batch(&feats.cast::<f64>())?;
            let batch_labels: Vec<u32> = idx.iter().map(|&i| labels[i]).collect();
            let targets = smooth_targets(&batch_labels, k, recipe.label_smoothing).cast::<f64>();
            let tape: Tape<f64> = Tape::new();
            let bound = head.bind(&tape, |_| true);
            let logits = tape.constant(x).matmul(bound.get(PROBE_W)?)?.add_trailing(bound.get(PROBE_B)?)?;
            let loss: Var<'_, f64> = logits.soft_cross_entropy(targets)?;
            let value = loss.value().item();
            let grads: HashMap<String, Tensor<f64>> = bound.gradients(&tape.backward(loss)?);
            opt.step(&mut head, &grads, sched.lr(step)?)?;
            step += 1;
            total += value * idx.len() as f64;
            count += idx.len();
        }
        emit(&mut log, &mut report, epoch + 1, "train", "loss", total / count as f64);
        probe = snapshot(&norm, &head)?;
        test_acc = accuracy(&argmax_rows(&probe.logits(eval_features)?), eval_labels);
        emit(&mut log, &mut report, epoch + 1, "test", "acc", test_acc);
    }
    Ok(ProbeRun {
        head: probe,
        log,
        test_acc,
    })
}

/// Dispatches one protocol. `init` holds pre-trained weights for the
/// evaluation protocols; linear probing and partial fine-tuning require it,
/// fine-tuning without it is training from scratch.
#[allow(clippy::too_many_arguments)]
pub fn run_protocol(
    kind: Protocol,
    cfg: &MaeConfig,
    recipe: &TrainRecipe,
    aug: &AugmentSpec,
    corpus: &Corpus,
    init: Option<&Params>,
    seed: u64,
    report: Reporter<'_>,
) -> Result<ProtocolOutcome> {
    let vit = &cfg.encoder;
    let need_init = || {
        init.ok_or_else(|| Error::invalid(format!("{} needs pre-trained encoder weights", kind.name())))
    };
    if let Some(p) = init {
        check_depth(p, vit)?;
    }
    Ok(match kind {
        Protocol::Pretrain => {
            ProtocolOutcome::Pretrain(pretrain(cfg, recipe, aug, &corpus.train, &corpus.stats, seed, report)?)
        }
        Protocol::Linprobe => ProtocolOutcome::Probe(linear_probe(vit, need_init()?, recipe, aug, corpus, seed, report)?),
        Protocol::PartialFt => {
            ProtocolOutcome::Classifier(train_classifier(vit, Some(need_init()?), recipe, aug, corpus, seed, report)?)
        }
        Protocol::Finetune => ProtocolOutcome::Classifier(train_classifier(vit, init, recipe, aug, corpus, seed, report)?),
        Protocol::SupervisedScratch => {
            ProtocolOutcome::Classifier(train_classifier(vit, None, recipe, aug, corpus, seed, report)?)
        }
    })
}

/// Rejects checkpoints whose encoder depth or width differs from `cfg`.
pub fn check_depth(params: &Params, cfg: &ViTConfig) -> Result<()> {
    let depth = (0..)
        .take_while(|i| params.contains(&format!("{ENCODER}.blocks.{i}.norm1.weight")))
        .count();
    if depth != cfg.depth {
        return Err(Error::invalid(format!(
            "checkpoint encoder has {depth} blocks, the configuration asks for {}",
            cfg.depth
        )));
    }
    let width = params.require(&format!("{ENCODER}.cls_token"))?.len();
    if width != cfg.width {
        return Err(Error::invalid(format!(
            "checkpoint encoder width is {width}, the configuration asks for {}",
            cfg.width
        )));
    }
    Ok(())
}

impl OptimizerKind {
    pub fn name(&self) -> &'static str {
        match self {
            OptimizerKind::AdamW { .. } => "adamw",
            OptimizerKind::SgdMomentum { .. } => "sgd_momentum",
        }
    }
}
