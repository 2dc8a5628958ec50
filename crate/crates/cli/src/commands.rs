use std::fs;
use std::path::{Path, PathBuf};

use mae_core::config::{desk_finetune, desk_linprobe, desk_partial_finetune, desk_scratch, RunConfig};
use mae_core::data::{self, synth, AugmentSpec, ChannelStats, PackedDataset};
use mae_core::flops::{measure_step, sweep, sweep_csv};
use mae_core::mae::{MaeConfig, Sampling};
use mae_core::train::{
    check_depth, linear_probe, pretrain as run_pretrain, stored_basis, train_classifier, Corpus, Freeze,
    MetricsLog, Record, TrainRecipe,
};
use mae_core::vit::Params;
use mae_core::{Error, Result};

use crate::images;
use crate::{Common, EvalArgs};

pub const CHECKPOINT: &str = "checkpoint.mae";
pub const METRICS: &str = "metrics.csv";
pub const CONFIG: &str = "config.cfg";

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::Data(format!("cannot create {}: {e}", dir.display())))
}

/// Dataset and statistics with I/O failures naming the file.
fn load_dataset(path: &Path) -> Result<(PackedDataset, ChannelStats)> {
    data::load_with_stats(path).map_err(|e| match e {
        Error::Io(io) => Error::Data(format!("{}: {io}", path.display())),
        other => other,
    })
}

/// Overrides the epoch count. A warmup that no longer fits is shortened in
/// proportion to the schedule.
fn set_epochs(cfg: &mut RunConfig, epochs: usize) -> Result<()> {
    let r = &cfg.recipe;
    if r.warmup_epochs > epochs as f64 {
        let warmup = r.warmup_epochs * epochs as f64 / r.epochs as f64;
        cfg.set("warmup_epochs", &warmup.to_string())?;
    }
    cfg.set("epochs", &epochs.to_string())
}

fn progress(r: &Record) {
    eprintln!("epoch {:>4}  {} {} {}", r.epoch, r.split, r.metric, mae_core::train::format_g6(r.value));
}

/// `base` with the file at `path` applied on top.
fn with_file(base: RunConfig, path: Option<&Path>) -> Result<RunConfig> {
    match path {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Error::Data(format!("cannot read {}: {e}", p.display())))?;
            base.merge(&text)
        }
        None => Ok(base),
    }
}

fn load_params(path: &Path) -> Result<Params> {
    Params::load(path).map_err(|e| match e {
        Error::Io(io) => Error::Data(format!("{}: {io}", path.display())),
        other => other,
    })
}

/// The model section a checkpoint was trained with, from the `config.cfg`
/// written next to it; Tiny-desk when there is none.
fn checkpoint_model(checkpoint: &Path) -> Result<MaeConfig> {
    let sibling = checkpoint.with_file_name(CONFIG);
    if sibling.exists() {
        Ok(RunConfig::load(&sibling)?.mae)
    } else {
        Ok(MaeConfig::tiny_desk())
    }
}

pub fn pack(dir: &Path, labels: &Path, out: &Path, classes: Option<usize>) -> Result<()> {
    let ds = images::pack_dir(dir, labels, classes)?;
    save_dataset(&ds, out)?;
    eprintln!("packed {} images of {}x{} into {}", ds.len(), ds.width, ds.height, out.display());
    Ok(())
}

fn save_dataset(ds: &PackedDataset, out: &Path) -> Result<()> {
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    ds.save(out)?;
    ChannelStats::compute(ds).save(data::stats_path(out))
}

pub fn synth(spec: &synth::SynthSpec, seed: u64, out: &Path) -> Result<()> {
    let ds = synth::generate(spec, seed)?;
    save_dataset(&ds, out)?;
    eprintln!("wrote {} synthetic images to {}", ds.len(), out.display());
    Ok(())
}

/// Command-line overrides for the pre-training sweep axes.
pub struct Sweep {
    pub mask_ratio: Option<f64>,
    pub sampling: Option<Sampling>,
    pub target: Option<String>,
    pub decoder_depth: Option<usize>,
    pub decoder_width: Option<usize>,
    pub epochs: Option<usize>,
}

impl Sweep {
    fn apply(&self, cfg: &mut RunConfig) -> Result<()> {
        let mut set = |key: &str, value: Option<String>| match value {
            Some(v) => cfg.set(key, &v),
            None => Ok(()),
        };
        set("mask_ratio", self.mask_ratio.map(|v| v.to_string()))?;
        set("sampling", self.sampling.map(|s| s.name().to_string()))?;
        set("target", self.target.clone())?;
        set("decoder_depth", self.decoder_depth.map(|v| v.to_string()))?;
        set("decoder_width", self.decoder_width.map(|v| v.to_string()))?;
        if let Some(e) = self.epochs {
            set_epochs(cfg, e)?;
        }
        cfg.validate()
    }
}

pub fn pretrain(data_path: &Path, sweep: &Sweep, common: &Common) -> Result<()> {
    let mut cfg = with_file(RunConfig::default(), common.config.as_deref())?;
    sweep.apply(&mut cfg)?;
    let (ds, stats) = load_dataset(data_path)?;
    create_dir(&common.out)?;
    let run = run_pretrain(&cfg.mae, &cfg.recipe, &cfg.augment, &ds, &stats, common.seed, &mut progress)?;
    run.params.save(common.out.join(CHECKPOINT))?;
    run.log.save(common.out.join(METRICS))?;
    fs::write(common.out.join(CONFIG), cfg.to_text())?;
    eprintln!("checkpoint written to {}", common.out.join(CHECKPOINT).display());
    Ok(())
}

#[derive(Debug, Clone, Copy)]
pub enum Eval {
    Linprobe,
    Finetune,
    Partial(Option<usize>),
    PartialMlp,
}

fn corpus(train: &Path, test: Option<&Path>) -> Result<Corpus> {
    let (train, stats) = load_dataset(train)?;
    let test = test.map(|p| load_dataset(p).map(|d| d.0)).transpose()?;
    Ok(Corpus { train, test, stats })
}

pub fn evaluate(which: Eval, args: &EvalArgs) -> Result<()> {
    let mae = checkpoint_model(&args.checkpoint)?;
    let preset = match which {
        Eval::Linprobe => desk_linprobe(),
        Eval::Finetune => desk_finetune(),
        Eval::Partial(_) | Eval::PartialMlp => desk_partial_finetune(1),
    };
    let base = RunConfig::from_parts(mae, preset, AugmentSpec::eval(mae.encoder.image_size));
    let mut cfg = with_file(base, args.common.config.as_deref())?;
    match which {
        Eval::Partial(Some(k)) => cfg.recipe.freeze = Freeze::LastBlocks(k),
        Eval::PartialMlp => cfg.recipe.freeze = Freeze::LastMlp,
        _ => {}
    }
    if let Some(e) = args.epochs {
        set_epochs(&mut cfg, e)?;
    }
    cfg.validate()?;
    let encoder = load_params(&args.checkpoint)?;
    check_depth(&encoder, &cfg.mae.encoder)?;
    let corpus = corpus(&args.data, args.test.as_deref())?;
    let out = &args.common.out;
    create_dir(out)?;
    let seed = args.common.seed;
    let vit = &cfg.mae.encoder;
    let (log, acc) = match which {
        Eval::Linprobe => {
            let run = linear_probe(vit, &encoder, &cfg.recipe, &cfg.augment, &corpus, seed, &mut progress)?;
            let folded = run.head.fold();
            let mut head = Params::<f64>::new();
            head.insert("head.weight", folded.weight);
            head.insert("head.bias", folded.bias);
            head.save(out.join("probe.mae"))?;
            (run.log, run.test_acc)
        }
        _ => {
            let run = train_classifier(vit, Some(&encoder), &cfg.recipe, &cfg.augment, &corpus, seed, &mut progress)?;
            run.ema.as_ref().unwrap_or(&run.params).save(out.join("classifier.mae"))?;
            (run.log, run.test_acc)
        }
    };
    finish(out, &log, &cfg, acc)
}

fn finish(out: &Path, log: &MetricsLog, cfg: &RunConfig, acc: f64) -> Result<()> {
    log.save(out.join(METRICS))?;
    fs::write(out.join(CONFIG), cfg.to_text())?;
    println!("test accuracy {}", mae_core::train::format_g6(acc));
    Ok(())
}

pub fn scratch(data_path: &Path, test: Option<&Path>, epochs: Option<usize>, common: &Common) -> Result<()> {
    let base = RunConfig::from_parts(MaeConfig::tiny_desk(), desk_scratch(), AugmentSpec::eval(32));
    let mut cfg = with_file(base, common.config.as_deref())?;
    if let Some(e) = epochs {
        set_epochs(&mut cfg, e)?;
    }
    cfg.validate()?;
    let corpus = corpus(data_path, test)?;
    create_dir(&common.out)?;
    let run = train_classifier(
        &cfg.mae.encoder,
        None,
        &cfg.recipe,
        &cfg.augment,
        &corpus,
        common.seed,
        &mut progress,
    )?;
    run.ema.as_ref().unwrap_or(&run.params).save(common.out.join("classifier.mae"))?;
    finish(&common.out, &run.log, &cfg, run.test_acc)
}

pub fn reconstruct(
    checkpoint: &Path,
    data_path: &Path,
    indices: &[usize],
    mask_ratio: Option<f64>,
    common: &Common,
) -> Result<()> {
    let base = RunConfig::from_parts(
        checkpoint_model(checkpoint)?,
        TrainRecipe::pretrain(),
        AugmentSpec::pretrain(32),
    );
    let cfg = with_file(base, common.config.as_deref())?;
    let params = load_params(checkpoint)?;
    check_depth(&params, &cfg.mae.encoder)?;
    let (ds, stats) = load_dataset(data_path)?;
    let basis = stored_basis(&params);
    let out = mae_core::viz::reconstruct(&params, &cfg.mae, basis.as_ref(), &ds, &stats, indices, mask_ratio, common.seed)?;
    create_dir(&common.out)?;
    for (&i, (raster, _)) in indices.iter().zip(&out) {
        let path: PathBuf = common.out.join(format!("reconstruct_{i}.png"));
        images::write_png(raster, &path)?;
        eprintln!("wrote {}", path.display());
    }
    Ok(())
}

pub fn flops(ratios: &[f64], depths: &[usize], out: Option<&Path>) -> Result<()> {
    if let Some(&r) = ratios.iter().find(|r| !(0.0..1.0).contains(*r)) {
        return Err(Error::Invalid(format!("mask ratio {r} outside [0, 1)")));
    }
    let csv = sweep_csv(&sweep(ratios, depths));
    match out {
        Some(p) => {
            if let Some(parent) = p.parent().filter(|p| !p.as_os_str().is_empty()) {
                create_dir(parent)?;
            }
            fs::write(p, csv)?;
        }
        None => print!("{csv}"),
    }
    Ok(())
}

pub fn measure(config: Option<&Path>, batch: usize, reps: usize, seed: u64) -> Result<()> {
    let cfg = with_file(RunConfig::default(), config)?;
    if batch == 0 || reps == 0 {
        return Err(Error::Invalid("batch and repetitions must be positive".into()));
    }
    let t = measure_step(&cfg.mae, batch, reps, seed)?;
    println!("mask_ratio,batch,ms_without_mask_tokens,ms_with_mask_tokens,speedup");
    println!(
        "{},{},{:.3},{:.3},{:.3}",
        cfg.mae.mask_ratio,
        batch,
        t.without_mask_tokens.as_secs_f64() * 1e3,
        t.with_mask_tokens.as_secs_f64() * 1e3,
        t.speedup()
    );
    Ok(())
}
