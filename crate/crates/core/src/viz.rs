//! Reconstruction triptychs: masked input, model prediction, ground truth.

use crate::data::{make_batch, unstandardize, AugmentSpec, ChannelStats, PackedDataset};
use crate::error::{Error, Result};
use crate::mae::{mae_predict, MaeConfig, MaskPlan, PcaBasis, TargetKind};
use crate::rng::{self, Domain};
use crate::tensor::Tensor;
use crate::vit::{patchify, unpatchify, Params};

/// Width of the black bar between panels.
pub const SEPARATOR: usize = 4;
/// Fill value of masked patches in the left panel.
pub const MASK_GRAY: u8 = 128;

/// 8-bit RGB image, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Raster {
    pub width: usize,
    pub height: usize,
    pub rgb: Vec<u8>,
}

impl Raster {
    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.rgb[i], self.rgb[i + 1], self.rgb[i + 2]]
    }
}

/// Standardized `[H,W,C]` floats back to RGB bytes (grayscale is
/// replicated), clamped to `[0, 255]`.
pub fn to_rgb(img: &Tensor<f32>, stats: &ChannelStats) -> Result<Vec<u8>> {
    let &[h, w, c] = img.shape() else {
        return Err(Error::invalid(format!("expected an [H,W,C] image, got {:?}", img.shape())));
    };
    if c != 1 && c != 3 {
        return Err(Error::invalid(format!("cannot render {c}-channel images")));
    }
    let mut unit = img.clone();
    unstandardize(&mut unit, stats);
    let mut out = Vec::with_capacity(h * w * 3);
    for px in unit.data().chunks(c) {
        for ch in 0..3 {
            let v = px[if c == 1 { 0 } else { ch }];
            out.push((v * 255.0).round().clamp(0.0, 255.0) as u8);
        }
    }
    Ok(out)
}

/// Predicted patches `[n, target_dim]` mapped back to a standardized
/// `[H,W,C]` image. Normalized-pixel predictions take the mean and spread of
/// the ground-truth patch; PCA predictions are projected back.
pub fn prediction_image(
    pred: &Tensor<f32>,
    truth: &Tensor<f32>,
    cfg: &MaeConfig,
    basis: Option<&PcaBasis>,
) -> Result<Tensor<f32>> {
    let enc = &cfg.encoder;
    let p = enc.patch_size;
    let side = enc.grid_side();
    let patches = match cfg.target {
        TargetKind::RawPixels => pred.clone(),
        TargetKind::NormalizedPixels => {
            let gt = patchify(truth, p)?;
            let d = enc.patch_dim();
            let mut out = pred.clone();
            for (row, g) in out.data_mut().chunks_mut(d).zip(gt.data().chunks(d)) {
                let mean = g.iter().map(|&v| v as f64).sum::<f64>() / d as f64;
                let var = g.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / d as f64;
                let scale = (var + cfg.norm_eps).sqrt();
                for v in row {
                    *v = (*v as f64 * scale + mean) as f32;
                }
            }
            out
        }
        TargetKind::Pca(_) => {
            let basis = basis.ok_or_else(|| Error::invalid("pca predictions need the fitted basis"))?;
            basis.reconstruct(pred)?
        }
    };
    unpatchify(&patches, p, (side, side))
}

/// Three panels side by side with [`SEPARATOR`]-pixel black bars: the ground
/// truth with masked patches painted [`MASK_GRAY`], the prediction for every
/// patch, and the ground truth.
pub fn triptych(
    truth: &Tensor<f32>,
    prediction: &Tensor<f32>,
    plan: &MaskPlan,
    patch: usize,
    stats: &ChannelStats,
) -> Result<Raster> {
    let &[h, w, _] = truth.shape() else {
        return Err(Error::invalid(format!("expected an [H,W,C] image, got {:?}", truth.shape())));
    };
    if prediction.shape() != truth.shape() {
        return Err(Error::shape("triptych", prediction.shape(), truth.shape()));
    }
    let cols = w / patch;
    if plan.n != cols * (h / patch) {
        return Err(Error::invalid(format!("plan covers {} patches, image has {}", plan.n, cols * (h / patch))));
    }
    let gt = to_rgb(truth, stats)?;
    let pr = to_rgb(prediction, stats)?;
    let mut masked = gt.clone();
    for y in 0..h {
        for x in 0..w {
            if plan.mask[(y / patch) * cols + x / patch] == 1 {
                masked[(y * w + x) * 3..][..3].fill(MASK_GRAY);
            }
        }
    }
    let width = 3 * w + 2 * SEPARATOR;
    let mut rgb = vec![0u8; width * h * 3];
    for (k, panel) in [&masked, &pr, &gt].into_iter().enumerate() {
        let x0 = k * (w + SEPARATOR);
        for y in 0..h {
            let dst = (y * width + x0) * 3;
            rgb[dst..dst + w * 3].copy_from_slice(&panel[y * w * 3..(y + 1) * w * 3]);
        }
    }
    Ok(Raster { width, height: h, rgb })
}

/// One triptych per requested image. Images are center-cropped; `mask_ratio`
/// overrides the configured ratio.
pub fn reconstruct(
    params: &Params,
    cfg: &MaeConfig,
    basis: Option<&PcaBasis>,
    ds: &PackedDataset,
    stats: &ChannelStats,
    indices: &[usize],
    mask_ratio: Option<f64>,
    seed: u64,
) -> Result<Vec<(Raster, MaskPlan)>> {
    let cfg = MaeConfig {
        mask_ratio: mask_ratio.unwrap_or(cfg.mask_ratio),
        ..*cfg
    };
    cfg.validate()?;
    if let Some(&bad) = indices.iter().find(|&&i| i >= ds.len()) {
        return Err(Error::Data(format!("image index {bad} out of range for {} images", ds.len())));
    }
    let spec = AugmentSpec::eval(cfg.encoder.image_size);
    let mut out = Vec::with_capacity(indices.len());
    for &i in indices {
        let batch = make_batch(ds, &[i], &spec, stats, seed, 0)?;
        let plan = cfg.sample_plan(&mut rng::keyed(seed, Domain::Mask, &[u64::MAX, i as u64]))?;
        let pred = mae_predict(&batch.images, std::slice::from_ref(&plan), params, &cfg)?;
        let [_, n, d] = pred.shape()[..] else { unreachable!() };
        let dims = batch.images.shape()[1..].to_vec();
        let truth = batch.images.clone().reshape(&dims)?;
        let pred = pred.reshape(&[n, d])?;
        let image = prediction_image(&pred, &truth, &cfg, basis)?;
        out.push((triptych(&truth, &image, &plan, cfg.encoder.patch_size, stats)?, plan));
    }
    Ok(out)
}
