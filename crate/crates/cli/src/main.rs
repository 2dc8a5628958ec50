//! `mae`: pre-train, evaluate and inspect masked autoencoders from the shell.
//!
//! Exit codes: 0 on success, 2 for configuration or argument errors, 3 for
//! data and filesystem errors.

mod commands;
mod images;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use mae_core::mae::Sampling;

#[derive(Parser)]
#[command(name = "mae", version, about = "Masked autoencoder pre-training and evaluation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
pub struct Common {
    /// Seed for initialisation, shuffling, masks and augmentation.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// `key = value` file applied on top of the command's defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
}

#[derive(Args, Clone)]
pub struct EvalArgs {
    /// Pre-trained checkpoint.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Packed training set.
    #[arg(long)]
    pub data: PathBuf,
    /// Packed held-out set; accuracy is measured on the training set without it.
    #[arg(long)]
    pub test: Option<PathBuf>,
    /// Overrides the configured number of epochs.
    #[arg(long)]
    pub epochs: Option<usize>,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Subcommand)]
enum Command {
    /// Pack a directory of binary PPM images into a dataset file.
    Pack {
        /// Directory of `.ppm` files, all with the same extents.
        #[arg(long)]
        images: PathBuf,
        /// Lines of `<file name> <class index>`; every image needs one.
        #[arg(long)]
        labels: PathBuf,
        /// Output dataset; the statistics sidecar is written next to it.
        #[arg(long)]
        out: PathBuf,
        /// Declared class count (default: largest label + 1).
        #[arg(long)]
        classes: Option<usize>,
    },
    /// Generate the procedural stripe corpus as a packed dataset.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 256)]
        count: usize,
        #[arg(long, default_value_t = 32)]
        size: usize,
        #[arg(long, default_value_t = 2)]
        classes: usize,
        /// Stripe period range in pixels, `min,max`.
        #[arg(long, value_parser = parse_range)]
        period: Option<(f64, f64)>,
        /// Pixel noise standard deviation in 8-bit units.
        #[arg(long)]
        noise: Option<f64>,
        /// Paint a random rectangle over each texture.
        #[arg(long)]
        occluder: bool,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Masked autoencoder pre-training.
    Pretrain {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        mask_ratio: Option<f64>,
        #[arg(long, value_parser = parse_sampling)]
        sampling: Option<Sampling>,
        /// pixels, normalized_pixels, pca or pca:k.
        #[arg(long)]
        target: Option<String>,
        #[arg(long)]
        decoder_depth: Option<usize>,
        #[arg(long)]
        decoder_width: Option<usize>,
        #[arg(long)]
        epochs: Option<usize>,
        #[command(flatten)]
        common: Common,
    },
    /// Linear probe on the frozen encoder.
    Linprobe(EvalArgs),
    /// End-to-end fine-tuning.
    Finetune(EvalArgs),
    /// Fine-tuning of the last blocks only.
    Partialft {
        #[command(flatten)]
        eval: EvalArgs,
        /// Number of trailing blocks to tune (0 tunes only the head).
        #[arg(long)]
        blocks: Option<usize>,
        /// Tune only the MLP of the last block.
        #[arg(long, conflicts_with = "blocks")]
        mlp_only: bool,
    },
    /// Supervised training from random initialisation.
    Scratch {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        test: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
        #[command(flatten)]
        common: Common,
    },
    /// Masked input, reconstruction and ground truth as PNG triptychs.
    Reconstruct {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Comma-separated image indices.
        #[arg(long, value_delimiter = ',', default_value = "0")]
        indices: Vec<usize>,
        /// Masking ratio to reconstruct at instead of the configured one.
        #[arg(long)]
        mask_ratio: Option<f64>,
        #[command(flatten)]
        common: Common,
    },
    /// Analytic FLOPs sweep, or measured step times with `--measure`.
    Flops {
        #[arg(long, value_delimiter = ',', default_value = "0,0.25,0.5,0.75,0.9")]
        ratios: Vec<f64>,
        #[arg(long, value_delimiter = ',', default_value = "1,2,4,8")]
        decoder_depths: Vec<usize>,
        /// Time one Tiny-desk training step with and without mask tokens.
        #[arg(long)]
        measure: bool,
        #[arg(long, default_value_t = 16)]
        batch: usize,
        #[arg(long, default_value_t = 5)]
        reps: usize,
        /// Write the CSV here instead of standard output.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn parse_range(s: &str) -> Result<(f64, f64), String> {
    let (a, b) = s.split_once(',').ok_or("expected `min,max`")?;
    let a: f64 = a.trim().parse().map_err(|_| format!("bad number `{a}`"))?;
    let b: f64 = b.trim().parse().map_err(|_| format!("bad number `{b}`"))?;
    if !(0.0 < a && a <= b) {
        return Err("need 0 < min <= max".into());
    }
    Ok((a, b))
}

fn parse_sampling(s: &str) -> Result<Sampling, String> {
    Sampling::parse(s).map_err(|e| e.to_string())
}

fn threads_from_env() -> mae_core::Result<()> {
    match std::env::var("MAE_THREADS") {
        Ok(v) => {
            let n: usize = v
                .parse()
                .ok()
                .filter(|&n| n > 0)
                .ok_or_else(|| mae_core::Error::Invalid(format!("MAE_THREADS must be a positive integer, got `{v}`")))?;
            mae_core::set_threads(n)
        }
        Err(_) => Ok(()),
    }
}

fn run(cli: Cli) -> mae_core::Result<()> {
    threads_from_env()?;
    match cli.command {
        Command::Pack {
            images,
            labels,
            out,
            classes,
        } => commands::pack(&images, &labels, &out, classes),
        Command::Synth {
            out,
            count,
            size,
            classes,
            period,
            noise,
            occluder,
            seed,
        } => {
            let mut spec = mae_core::data::synth::SynthSpec::new(count, size, classes);
            if let Some(p) = period {
                spec.period = p;
            }
            if let Some(n) = noise {
                spec.noise = n;
            }
            spec.occluder = occluder;
            commands::synth(&spec, seed, &out)
        }
        Command::Pretrain {
            data,
            mask_ratio,
            sampling,
            target,
            decoder_depth,
            decoder_width,
            epochs,
            common,
        } => {
            let sweep = commands::Sweep {
                mask_ratio,
                sampling,
                target,
                decoder_depth,
                decoder_width,
                epochs,
            };
            commands::pretrain(&data, &sweep, &common)
        }
        Command::Linprobe(a) => commands::evaluate(commands::Eval::Linprobe, &a),
        Command::Finetune(a) => commands::evaluate(commands::Eval::Finetune, &a),
        Command::Partialft { eval, blocks, mlp_only } => {
            let which = if mlp_only {
                commands::Eval::PartialMlp
            } else {
                commands::Eval::Partial(blocks)
            };
            commands::evaluate(which, &eval)
        }
        Command::Scratch {
            data,
            test,
            epochs,
            common,
        } => commands::scratch(&data, test.as_deref(), epochs, &common),
        Command::Reconstruct {
            checkpoint,
            data,
            indices,
            mask_ratio,
            common,
        } => commands::reconstruct(&checkpoint, &data, &indices, mask_ratio, &common),
        Command::Flops {
            ratios,
            decoder_depths,
            measure,
            batch,
            reps,
            out,
            config,
            seed,
        } => {
            if measure {
                commands::measure(config.as_deref(), batch, reps, seed)
            } else {
                commands::flops(&ratios, &decoder_depths, out.as_deref())
            }
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_config() { 2 } else { 3 })
        }
    }
}
