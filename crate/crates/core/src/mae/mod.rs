//! Masked autoencoder: mask plans, visible-only encoding, mask-token
//! decoding, reconstruction targets and the masked reconstruction loss.
//!
//! Decoder parameters live next to the encoder ones:
//!
//! ```text
//! decoder_embed.{weight,bias}      encoder width -> decoder width
//! mask_token                       [decoder width]
//! decoder_blocks.{i}.*             same layout as encoder blocks
//! decoder_norm.{weight,bias}
//! decoder_pred.{weight,bias}       decoder width -> target dim
//! ```

mod masking;
mod target;

use rand::Rng;

use crate::error::{Error, Result};
use crate::rng::{self, Domain, StreamRng};
use crate::tensor::{Real, Tape, Tensor, Var};
use crate::vit::{
    self, class_token, embed_patches, init_block, init_encoder, init_linear, init_norm, layer_norm, linear,
    normal, patchify, prepend_cls, run_blocks, sincos_pos_embed, split_pos, Bound, Params, ViTConfig, ENCODER,
};

pub use masking::{
    block_mask_plan, block_mask_plan_traced, grid_mask_plan, len_keep, random_mask_plan, MaskPlan, Rect,
    MIN_BLOCK_AREA, MIN_BLOCK_ASPECT,
};
pub use target::{build_target, normalize_patches, pca_fit, PcaBasis, TargetKind};

pub const DEFAULT_NORM_EPS: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Sampling {
    Random,
    Block,
    Grid,
}

impl Sampling {
    pub fn name(&self) -> &'static str {
        match self {
            Sampling::Random => "random",
            Sampling::Block => "block",
            Sampling::Grid => "grid",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "random" => Ok(Sampling::Random),
            "block" => Ok(Sampling::Block),
            "grid" => Ok(Sampling::Grid),
            _ => Err(Error::invalid(format!("unknown mask sampler `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MaeConfig {
    pub encoder: ViTConfig,
    pub decoder_depth: usize,
    pub decoder_width: usize,
    pub decoder_heads: usize,
    pub mask_ratio: f64,
    pub sampling: Sampling,
    pub target: TargetKind,
    pub norm_eps: f64,
    /// Feed mask tokens through the encoder instead of dropping masked
    /// patches (the costly baseline used for timing comparisons).
    pub mask_token_in_encoder: bool,
}

impl MaeConfig {
    /// Tiny-desk encoder with a 2-block, 64-wide decoder.
    pub fn tiny_desk() -> Self {
        Self {
            encoder: ViTConfig::tiny_desk(),
            decoder_depth: 2,
            decoder_width: 64,
            decoder_heads: 4,
            mask_ratio: 0.75,
            sampling: Sampling::Random,
            target: TargetKind::RawPixels,
            norm_eps: DEFAULT_NORM_EPS,
            mask_token_in_encoder: false,
        }
    }

    /// ViT-L/16 with the 8-block, 512-wide decoder.
    pub fn large() -> Self {
        Self {
            encoder: ViTConfig::large(),
            decoder_depth: 8,
            decoder_width: 512,
            decoder_heads: 16,
            ..Self::tiny_desk()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        vit::ViTConfig {
            depth: self.decoder_depth,
            width: self.decoder_width,
            heads: self.decoder_heads,
            ..self.encoder
        }
        .validate()?;
        if !(0.0..1.0).contains(&self.mask_ratio) {
            return Err(Error::invalid(format!("mask ratio {} outside [0, 1)", self.mask_ratio)));
        }
        if self.sampling == Sampling::Grid && self.encoder.grid_side() % 2 != 0 {
            return Err(Error::invalid("grid sampling needs an even patch grid"));
        }
        if self.sampling == Sampling::Block && self.mask_ratio == 0.0 {
            return Err(Error::invalid("block sampling needs a positive mask ratio"));
        }
        if !(self.norm_eps > 0.0) {
            return Err(Error::invalid("norm_eps must be positive"));
        }
        if let TargetKind::Pca(k) = self.target {
            if k == 0 || k > self.encoder.patch_dim() {
                return Err(Error::invalid(format!("pca target k={k} outside 1..={}", self.encoder.patch_dim())));
            }
        }
        Ok(())
    }

    /// Masking ratio actually applied; grid sampling always removes 3 of 4.
    pub fn effective_mask_ratio(&self) -> f64 {
        match self.sampling {
            Sampling::Grid => 0.75,
            _ => self.mask_ratio,
        }
    }

    pub fn target_dim(&self) -> usize {
        self.target.dim(self.encoder.patch_dim())
    }

    pub fn sample_plan(&self, rng: &mut impl Rng) -> Result<MaskPlan> {
        let n = self.encoder.n_patches();
        match self.sampling {
            Sampling::Random => random_mask_plan(n, self.mask_ratio, rng),
            Sampling::Block => block_mask_plan(self.encoder.grid_side(), self.mask_ratio, rng),
            Sampling::Grid => grid_mask_plan(self.encoder.grid_side()),
        }
    }

    /// One plan per key, each from its own keyed stream, trimmed to a shared
    /// `len_keep`.
    pub fn sample_plans(&self, seed: u64, keys: &[[u64; 2]]) -> Result<Vec<MaskPlan>> {
        let mut plans = keys
            .iter()
            .map(|k| self.sample_plan(&mut rng::keyed(seed, Domain::Mask, k)))
            .collect::<Result<Vec<_>>>()?;
        align_plans(&mut plans);
        Ok(plans)
    }
}

/// Trims every plan to the smallest `len_keep` in the batch (only block
/// sampling produces differing counts).
pub fn align_plans(plans: &mut [MaskPlan]) {
    if let Some(keep) = plans.iter().map(|p| p.len_keep).min() {
        for p in plans.iter_mut() {
            p.truncate_keep(keep);
        }
    }
}

/// Encoder, decoder and (optionally) the encoder mask token.
pub fn init_mae<T: Real>(cfg: &MaeConfig, rng: &mut impl Rng) -> Params<T> {
    let enc = &cfg.encoder;
    let mut params = Params::new();
    init_encoder(&mut params, enc, rng);
    if cfg.mask_token_in_encoder {
        params.insert(format!("{ENCODER}.mask_token"), normal(&[enc.width], 0.02, rng));
    }
    init_linear(&mut params, "decoder_embed", enc.width, cfg.decoder_width, rng);
    params.insert("mask_token", normal(&[cfg.decoder_width], 0.02, rng));
    for i in 0..cfg.decoder_depth {
        init_block(&mut params, &format!("decoder_blocks.{i}"), cfg.decoder_width, enc.mlp_ratio, rng);
    }
    init_norm(&mut params, "decoder_norm", cfg.decoder_width);
    init_linear(&mut params, "decoder_pred", cfg.decoder_width, cfg.target_dim(), rng);
    params
}

fn check_plans(plans: &[MaskPlan], batch: usize, n: usize) -> Result<usize> {
    if plans.len() != batch {
        return Err(Error::invalid(format!("{} mask plans for a batch of {batch}", plans.len())));
    }
    let keep = plans.first().map_or(n, |p| p.len_keep);
    for p in plans {
        if p.n != n {
            return Err(Error::invalid(format!("mask plan covers {} patches, image has {n}", p.n)));
        }
        if p.len_keep != keep {
            return Err(Error::invalid("mask plans in a batch must share len_keep"));
        }
    }
    Ok(keep)
}

/// Rows of `[b·n, w]` (flattened batch) holding the visible patches of every
/// image, in ascending patch order.
fn visible_rows(plans: &[MaskPlan]) -> Vec<usize> {
    plans
        .iter()
        .enumerate()
        .flat_map(|(i, p)| p.visible_sorted().into_iter().map(move |j| i * p.n + j))
        .collect()
}

/// Rebuilds the full `[b, n, w]` sequence from visible rows `[b, L, w]`
/// (ascending patch order) and a shared fill token `[w]` for masked slots.
fn unshuffle<'t, T: Real>(visible: Var<'t, T>, fill: Var<'t, T>, plans: &[MaskPlan]) -> Result<Var<'t, T>> {
    let shape = visible.shape();
    let (b, keep, w) = (shape[0], shape[1], shape[2]);
    let n = plans[0].n;
    let masked = n - keep;
    let fills = fill.reshape(&[1, w])?.gather_rows(&vec![0; b * masked])?;
    let pool = Var::concat(&[visible.reshape(&[b * keep, w])?, fills], 0)?;
    let mut index = vec![0; b * n];
    for (i, p) in plans.iter().enumerate() {
        for (s, j) in p.visible_sorted().into_iter().enumerate() {
            index[i * n + j] = i * keep + s;
        }
        for (t, &j) in p.masked().iter().enumerate() {
            index[i * n + j] = b * keep + i * masked + t;
        }
    }
    pool.gather_rows(&index)?.reshape(&[b, n, w])
}

fn encoder_pos<T: Real>(enc: &ViTConfig) -> Result<(Tensor<T>, Tensor<T>)> {
    split_pos(&sincos_pos_embed(enc.n_patches() + 1, enc.width)?)
}

/// Encodes only the visible patches of `[b,H,W,C]` images:
/// `[b, len_keep + 1, d]` with the class token first.
pub fn encode_visible<'t, T: Real>(
    images: &Tensor<T>,
    plans: &[MaskPlan],
    p: &Bound<'t, T>,
    cfg: &MaeConfig,
) -> Result<Var<'t, T>> {
    let enc = &cfg.encoder;
    let tape = p.get(&format!("{ENCODER}.cls_token"))?.tape();
    let patches = patchify(images, enc.patch_size)?;
    let (b, n) = (patches.shape()[0], patches.shape()[1]);
    let keep = check_plans(plans, b, n)?;
    let (pos_cls, pos_patch) = encoder_pos::<T>(enc)?;
    let x = embed_patches(tape.constant(patches), p, tape.constant(pos_patch))?;
    let x = x
        .reshape(&[b * n, enc.width])?
        .gather_rows(&visible_rows(plans))?
        .reshape(&[b, keep, enc.width])?;
    let x = prepend_cls(x, p.get(&format!("{ENCODER}.cls_token"))?, tape.constant(pos_cls))?;
    let x = run_blocks(x, p, &format!("{ENCODER}.blocks"), enc.depth, enc.heads, 0.0, None)?;
    layer_norm(x, p, &format!("{ENCODER}.norm"))
}

/// Baseline encoder that keeps every position and substitutes a learned mask
/// token for masked patches: `[b, n + 1, d]`.
pub fn encode_with_mask_tokens<'t, T: Real>(
    images: &Tensor<T>,
    plans: &[MaskPlan],
    p: &Bound<'t, T>,
    cfg: &MaeConfig,
) -> Result<Var<'t, T>> {
    let enc = &cfg.encoder;
    let tape = p.get(&format!("{ENCODER}.cls_token"))?.tape();
    let patches = patchify(images, enc.patch_size)?;
    let (b, n) = (patches.shape()[0], patches.shape()[1]);
    let keep = check_plans(plans, b, n)?;
    let (pos_cls, pos_patch) = encoder_pos::<T>(enc)?;
    let x = linear(tape.constant(patches), p, &format!("{ENCODER}.patch_embed"))?;
    let visible = x
        .reshape(&[b * n, enc.width])?
        .gather_rows(&visible_rows(plans))?
        .reshape(&[b, keep, enc.width])?;
    let x = unshuffle(visible, p.get(&format!("{ENCODER}.mask_token"))?, plans)?;
    let x = x.add_trailing(tape.constant(pos_patch))?;
    let x = prepend_cls(x, p.get(&format!("{ENCODER}.cls_token"))?, tape.constant(pos_cls))?;
    let x = run_blocks(x, p, &format!("{ENCODER}.blocks"), enc.depth, enc.heads, 0.0, None)?;
    layer_norm(x, p, &format!("{ENCODER}.norm"))
}

/// Decodes encoder latents into per-patch predictions `[b, n, target_dim]`,
/// row `i` belonging to grid patch `i`.
///
/// `latents` is either `[b, len_keep + 1, d]` from [`encode_visible`] (mask
/// tokens are inserted here) or `[b, n + 1, d]` from
/// [`encode_with_mask_tokens`].
pub fn decode_full<'t, T: Real>(
    latents: Var<'t, T>,
    plans: &[MaskPlan],
    p: &Bound<'t, T>,
    cfg: &MaeConfig,
) -> Result<Var<'t, T>> {
    let tape = latents.tape();
    let n = cfg.encoder.n_patches();
    let dw = cfg.decoder_width;
    let shape = latents.shape();
    let (b, tokens) = (shape[0], shape[1]);
    let keep = check_plans(plans, b, n)?;
    let x = linear(latents, p, "decoder_embed")?;
    let x = if tokens == n + 1 && keep != n {
        // mask tokens already went through the encoder
        x
    } else if tokens == keep + 1 {
        let rows: Vec<usize> = (0..b).flat_map(|i| (1..=keep).map(move |s| i * (keep + 1) + s)).collect();
        let cls = class_token(x)?.reshape(&[b, 1, dw])?;
        let visible = x.reshape(&[b * (keep + 1), dw])?.gather_rows(&rows)?.reshape(&[b, keep, dw])?;
        let full = unshuffle(visible, p.get("mask_token")?, plans)?;
        Var::concat(&[cls, full], 1)?
    } else {
        return Err(Error::invalid(format!(
            "latents hold {tokens} tokens; expected {} or {}",
            keep + 1,
            n + 1
        )));
    };
    let x = x.add_trailing(tape.constant(sincos_pos_embed(n + 1, dw)?))?;
    let x = run_blocks(x, p, "decoder_blocks", cfg.decoder_depth, cfg.decoder_heads, 0.0, None)?;
    let x = layer_norm(x, p, "decoder_norm")?;
    let x = linear(x, p, "decoder_pred")?;
    let td = cfg.target_dim();
    let rows: Vec<usize> = (0..b).flat_map(|i| (1..=n).map(move |j| i * (n + 1) + j)).collect();
    x.reshape(&[b * (n + 1), td])?.gather_rows(&rows)?.reshape(&[b, n, td])
}

/// Per-element weights for [`masked_mse`]: `mask / (Σ mask · D)`.
fn loss_weights<T: Real>(plans: &[MaskPlan], dim: usize) -> Result<Tensor<T>> {
    let total: usize = plans.iter().map(MaskPlan::masked_count).sum();
    if total == 0 {
        return Err(Error::invalid("masked loss is undefined when every patch is visible"));
    }
    let w = T::of(1.0 / (total * dim) as f64);
    let n = plans.first().map_or(0, |p| p.n);
    Ok(Tensor::from_fn(&[plans.len(), n, dim], |i| {
        let (img, j) = (i / (n * dim), (i / dim) % n);
        if plans[img].mask[j] == 1 {
            w
        } else {
            T::zero()
        }
    }))
}

/// Mean over masked patches of the per-patch mean squared error. Visible
/// patches get exactly zero gradient.
pub fn masked_mse<'t, T: Real>(pred: Var<'t, T>, target: &Tensor<T>, plans: &[MaskPlan]) -> Result<Var<'t, T>> {
    let shape = pred.shape();
    if shape.as_slice() != target.shape() || shape.len() != 3 || shape[0] != plans.len() {
        return Err(Error::shape("masked_mse", &shape, target.shape()));
    }
    let weights = loss_weights(plans, shape[2])?;
    let diff = pred.sub(pred.tape().constant(target.clone()))?;
    Ok(diff.mul(diff)?.mul_const(weights)?.sum())
}

/// Plain MSE over every patch, for comparison with [`masked_mse`].
pub fn full_mse<'t, T: Real>(pred: Var<'t, T>, target: &Tensor<T>) -> Result<Var<'t, T>> {
    if pred.shape().as_slice() != target.shape() {
        return Err(Error::shape("full_mse", &pred.shape(), target.shape()));
    }
    let diff = pred.sub(pred.tape().constant(target.clone()))?;
    Ok(diff.mul(diff)?.mean())
}

pub struct MaeOutput<'t, T: Real> {
    pub loss: Var<'t, T>,
    pub pred: Var<'t, T>,
    pub target: Tensor<T>,
    pub plans: Vec<MaskPlan>,
}

/// Forward pass for given plans: encode, decode, build the target, loss.
pub fn mae_forward<'t, T: Real>(
    images: &Tensor<T>,
    plans: Vec<MaskPlan>,
    p: &Bound<'t, T>,
    cfg: &MaeConfig,
    basis: Option<&PcaBasis>,
) -> Result<MaeOutput<'t, T>> {
    let latents = if cfg.mask_token_in_encoder {
        encode_with_mask_tokens(images, &plans, p, cfg)?
    } else {
        encode_visible(images, &plans, p, cfg)?
    };
    let pred = decode_full(latents, &plans, p, cfg)?;
    let target = build_target(images, cfg.encoder.patch_size, cfg.target, basis, cfg.norm_eps)?;
    let loss = masked_mse(pred, &target, &plans)?;
    Ok(MaeOutput {
        loss,
        pred,
        target,
        plans,
    })
}

/// One MAE step on a batch: plans drawn from `rng`, then [`mae_forward`].
pub fn mae_step<'t, T: Real>(
    images: &Tensor<T>,
    cfg: &MaeConfig,
    p: &Bound<'t, T>,
    basis: Option<&PcaBasis>,
    rng: &mut StreamRng,
) -> Result<MaeOutput<'t, T>> {
    let batch = images.shape().first().copied().unwrap_or(0);
    let mut plans = (0..batch).map(|_| cfg.sample_plan(rng)).collect::<Result<Vec<_>>>()?;
    align_plans(&mut plans);
    mae_forward(images, plans, p, cfg, basis)
}

/// Convenience: loss value for `params` without keeping a tape around.
pub fn mae_loss<T: Real>(
    images: &Tensor<T>,
    plans: Vec<MaskPlan>,
    params: &Params<T>,
    cfg: &MaeConfig,
    basis: Option<&PcaBasis>,
) -> Result<f64> {
    let tape = Tape::new();
    let bound = params.bind(&tape, |_| false);
    let out = mae_forward(images, plans, &bound, cfg, basis)?;
    let loss = out.loss.value().item().f64();
    Ok(loss)
}

/// Predictions `[b, n, target_dim]` for given plans, without gradients.
pub fn mae_predict<T: Real>(
    images: &Tensor<T>,
    plans: &[MaskPlan],
    params: &Params<T>,
    cfg: &MaeConfig,
) -> Result<Tensor<T>> {
    let tape = Tape::new();
    let bound = params.bind(&tape, |_| false);
    let latents = if cfg.mask_token_in_encoder {
        encode_with_mask_tokens(images, plans, &bound, cfg)?
    } else {
        encode_visible(images, plans, &bound, cfg)?
    };
    let pred = decode_full(latents, plans, &bound, cfg)?;
    let out = (*pred.value()).clone();
    Ok(out)
}
