//! Analytic compute model of the encoder/decoder pair, and a wall-clock
//! comparison of the two encoder variants.
//!
//! A multiply-accumulate counts as 2 FLOPs; norms, softmax, biases and the
//! small embedding/prediction projections are ignored.

use std::fmt::Write as _;
use std::time::{Duration, Instant};

use crate::error::Result;
use crate::mae::{len_keep, mae_forward, MaeConfig, MaskPlan};
use crate::rng::{self, Domain};
use crate::tensor::{Tape, Tensor};
use crate::vit::{Params, ViTConfig};

/// Cost of one transformer block over a sequence of `tokens` tokens.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CostModel {
    pub tokens: usize,
    pub width: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
}

impl CostModel {
    /// FLOPs per token: `2·(4d² + 2·T·d + 2·m·d²)` (QKV and output
    /// projections, attention scores and mixing, MLP).
    pub fn per_token(&self) -> f64 {
        let (t, d, m) = (self.tokens as f64, self.width as f64, self.mlp_ratio as f64);
        2.0 * (4.0 * d * d + 2.0 * t * d + 2.0 * m * d * d)
    }

    pub fn block(&self) -> f64 {
        self.per_token() * self.tokens as f64
    }
}

/// Decoder shape used by the estimate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DecoderShape {
    pub depth: usize,
    pub width: usize,
    pub heads: usize,
}

impl DecoderShape {
    pub fn of(cfg: &MaeConfig) -> Self {
        Self {
            depth: cfg.decoder_depth,
            width: cfg.decoder_width,
            heads: cfg.decoder_heads,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FlopsEstimate {
    pub encoder: f64,
    pub decoder: f64,
    pub total: f64,
    /// Total with mask tokens in the encoder over total without.
    pub ratio: f64,
}

fn encoder_flops(enc: &ViTConfig, tokens: usize) -> f64 {
    let m = CostModel {
        tokens,
        width: enc.width,
        heads: enc.heads,
        mlp_ratio: enc.mlp_ratio,
    };
    m.block() * enc.depth as f64
}

fn decoder_model(enc: &ViTConfig, dec: &DecoderShape, n_patches: usize) -> CostModel {
    CostModel {
        tokens: n_patches + 1,
        width: dec.width,
        heads: dec.heads,
        mlp_ratio: enc.mlp_ratio,
    }
}

/// FLOPs of one image through encoder and decoder at mask ratio `r`. The
/// encoder sees `len_keep + 1` tokens, or all `n + 1` when
/// `with_mask_tokens`; the decoder always sees `n + 1`.
pub fn flops_estimate(
    enc: &ViTConfig,
    dec: &DecoderShape,
    n_patches: usize,
    r: f64,
    with_mask_tokens: bool,
) -> FlopsEstimate {
    let keep = len_keep(n_patches, r);
    let decoder = decoder_model(enc, dec, n_patches).block() * dec.depth as f64;
    let with = encoder_flops(enc, n_patches + 1);
    let without = encoder_flops(enc, keep + 1);
    let encoder = if with_mask_tokens { with } else { without };
    FlopsEstimate {
        encoder,
        decoder,
        total: encoder + decoder,
        ratio: (with + decoder) / (without + decoder),
    }
}

/// Decoder FLOPs per token over encoder FLOPs per token, both over the full
/// `n + 1` sequence.
pub fn decoder_token_fraction(enc: &ViTConfig, dec: &DecoderShape, n_patches: usize) -> f64 {
    let e = CostModel {
        tokens: n_patches + 1,
        width: enc.width,
        heads: enc.heads,
        mlp_ratio: enc.mlp_ratio,
    };
    let d = decoder_model(enc, dec, n_patches);
    d.per_token() * dec.depth as f64 / (e.per_token() * enc.depth as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub encoder: &'static str,
    pub mask_ratio: f64,
    pub decoder_depth: usize,
    pub decoder_width: usize,
    pub flops_without: f64,
    pub flops_with: f64,
    pub ratio: f64,
}

/// Named encoder presets with the decoder width paired with each.
pub fn presets() -> Vec<(&'static str, ViTConfig, usize)> {
    vec![
        ("tiny-desk", ViTConfig::tiny_desk(), MaeConfig::tiny_desk().decoder_width),
        ("base", ViTConfig::base(), 512),
        ("large", ViTConfig::large(), 512),
        ("huge", ViTConfig::huge(), 512),
    ]
}

/// Every combination of preset, mask ratio and decoder depth.
pub fn sweep(ratios: &[f64], decoder_depths: &[usize]) -> Vec<SweepRow> {
    let mut rows = Vec::new();
    for (name, enc, width) in presets() {
        let n = enc.n_patches();
        for &depth in decoder_depths {
            let dec = DecoderShape {
                depth,
                width,
                heads: 16.min(width / 32).max(1),
            };
            for &r in ratios {
                let with = flops_estimate(&enc, &dec, n, r, true);
                let without = flops_estimate(&enc, &dec, n, r, false);
                rows.push(SweepRow {
                    encoder: name,
                    mask_ratio: r,
                    decoder_depth: depth,
                    decoder_width: width,
                    flops_without: without.total,
                    flops_with: with.total,
                    ratio: with.ratio,
                });
            }
        }
    }
    rows
}

pub const SWEEP_HEADER: &str = "encoder,mask_ratio,decoder_depth,decoder_width,gflops_without,gflops_with,ratio";

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut s = String::from(SWEEP_HEADER);
    s.push('\n');
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{:.4},{:.4},{:.3}",
            r.encoder,
            r.mask_ratio,
            r.decoder_depth,
            r.decoder_width,
            r.flops_without / 1e9,
            r.flops_with / 1e9,
            r.ratio
        );
    }
    s
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepTiming {
    pub without_mask_tokens: Duration,
    pub with_mask_tokens: Duration,
}

impl StepTiming {
    pub fn speedup(&self) -> f64 {
        self.with_mask_tokens.as_secs_f64() / self.without_mask_tokens.as_secs_f64()
    }
}

/// Median wall-clock time of one forward + backward training step on a
/// random batch, for the encoder without and with mask tokens. The two
/// variants alternate so that load drifting over the run hits both alike.
pub fn measure_step(cfg: &MaeConfig, batch: usize, reps: usize, seed: u64) -> Result<StepTiming> {
    let enc = cfg.encoder;
    let mut r = rng::keyed(seed, Domain::Eval, &[0]);
    let images: Tensor<f32> = crate::vit::normal(&[batch, enc.image_size, enc.image_size, enc.channels], 1.0, &mut r);
    let keys: Vec<[u64; 2]> = (0..batch as u64).map(|i| [0, i]).collect();
    let variants = [false, true]
        .into_iter()
        .map(|with| {
            let cfg = MaeConfig {
                mask_token_in_encoder: with,
                ..*cfg
            };
            let params: Params = crate::mae::init_mae(&cfg, &mut rng::keyed(seed, Domain::Init, &[0]));
            let plans = cfg.sample_plans(seed, &keys)?;
            Ok((cfg, params, plans))
        })
        .collect::<Result<Vec<_>>>()?;
    let step = |(cfg, params, plans): &(MaeConfig, Params, Vec<MaskPlan>)| -> Result<Duration> {
        let start = Instant::now();
        let tape = Tape::new();
        let bound = params.bind(&tape, |_| true);
        let out = mae_forward(&images, plans.clone(), &bound, cfg, None)?;
        let grads = tape.backward(out.loss)?;
        std::hint::black_box(bound.gradients(&grads));
        Ok(start.elapsed())
    };
    let mut samples = [Vec::with_capacity(reps), Vec::with_capacity(reps)];
    for rep in 0..=reps {
        for (v, times) in variants.iter().zip(&mut samples) {
            let t = step(v)?;
            // the first repetition warms caches and allocators
            if rep > 0 {
                times.push(t);
            }
        }
    }
    let [without, with] = samples.map(|mut s| {
        s.sort();
        s[s.len() / 2]
    });
    Ok(StepTiming {
        without_mask_tokens: without,
        with_mask_tokens: with,
    })
}
