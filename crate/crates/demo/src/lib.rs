//! WebAssembly bindings for the browser demo in `www/`.
//!
//! Each export has a plain Rust twin so the logic can be tested natively.

use mae_core::flops::{flops_estimate, presets, DecoderShape};
use mae_core::mae::{block_mask_plan, grid_mask_plan, len_keep, random_mask_plan, Sampling};
use mae_core::rng::{self, Domain};
use mae_core::vit::sincos_pos_embed;
use mae_core::Result;
use wasm_bindgen::prelude::*;

fn js(e: mae_core::Error) -> JsError {
    JsError::new(&e.to_string())
}

/// Mask bits (1 = removed) of a `side × side` patch grid.
pub fn mask_bits(side: usize, ratio: f64, sampling: &str, seed: u64) -> Result<Vec<u8>> {
    let mut r = rng::keyed(seed, Domain::Mask, &[]);
    let plan = match Sampling::parse(sampling)? {
        Sampling::Random => random_mask_plan(side * side, ratio, &mut r)?,
        Sampling::Block => block_mask_plan(side, ratio, &mut r)?,
        Sampling::Grid => grid_mask_plan(side)?,
    };
    Ok(plan.mask)
}

#[wasm_bindgen]
pub fn sample_mask(side: usize, ratio: f64, sampling: &str, seed: u32) -> Result<Vec<u8>, JsError> {
    mask_bits(side, ratio, sampling, seed as u64).map_err(js)
}

/// Visible patch count for `n` patches at ratio `r`.
#[wasm_bindgen]
pub fn kept_patches(n: usize, ratio: f64) -> usize {
    len_keep(n, ratio)
}

/// `(ratio, FLOPs with mask tokens / FLOPs without)` pairs, flattened, for
/// `steps` mask ratios evenly spaced in `[0, 0.95]`.
pub fn speedup_curve(preset: &str, decoder_depth: usize, decoder_width: usize, steps: usize) -> Option<Vec<f64>> {
    let (_, enc, _) = presets().into_iter().find(|(name, _, _)| *name == preset)?;
    let dec = DecoderShape {
        depth: decoder_depth,
        width: decoder_width,
        heads: 1,
    };
    let n = enc.n_patches();
    let steps = steps.max(2);
    Some(
        (0..steps)
            .flat_map(|i| {
                let r = 0.95 * i as f64 / (steps - 1) as f64;
                [r, flops_estimate(&enc, &dec, n, r, true).ratio]
            })
            .collect(),
    )
}

#[wasm_bindgen]
pub fn flops_curve(preset: &str, decoder_depth: usize, decoder_width: usize, steps: usize) -> Result<Vec<f64>, JsError> {
    speedup_curve(preset, decoder_depth, decoder_width, steps)
        .ok_or_else(|| JsError::new(&format!("unknown encoder preset `{preset}`")))
}

/// Row-major `[positions, dim]` sine-cosine table.
#[wasm_bindgen]
pub fn pos_embed(positions: usize, dim: usize) -> Result<Vec<f32>, JsError> {
    sincos_pos_embed::<f32>(positions, dim).map(|t| t.data().to_vec()).map_err(js)
}
