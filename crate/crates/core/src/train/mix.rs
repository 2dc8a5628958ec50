//! Label smoothing, mixup and cutmix.

use rand::Rng;
use rand_distr::{Beta, Distribution};

use crate::data::PackedDataset;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// `(1 − ε)·onehot + ε/k` rows for each label.
pub fn smooth_targets(labels: &[u32], n_classes: usize, smoothing: f64) -> Tensor<f32> {
    let off = smoothing / n_classes as f64;
    Tensor::from_fn(&[labels.len(), n_classes], |i| {
        let (row, c) = (i / n_classes, i % n_classes);
        let on = if labels[row] as usize == c { 1.0 - smoothing } else { 0.0 };
        (on + off) as f32
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Mix {
    /// Convex blend `λ·x + (1 − λ)·x_pair`.
    Mixup { lambda: f64 },
    /// Rectangle `[top..top+h, left..left+w]` pasted from the paired image;
    /// `lambda` is the uncovered area fraction.
    Cutmix {
        lambda: f64,
        top: usize,
        left: usize,
        height: usize,
        width: usize,
    },
}

impl Mix {
    pub fn lambda(&self) -> f64 {
        match *self {
            Mix::Mixup { lambda } | Mix::Cutmix { lambda, .. } => lambda,
        }
    }
}

/// Cutmix box for a requested `λ`: side fractions `sqrt(1 − λ)`, uniform
/// center, clipped to the image, `λ` recomputed from the clipped area.
pub fn cutmix_box(h: usize, w: usize, lambda: f64, rng: &mut impl Rng) -> Mix {
    let cut = (1.0 - lambda).max(0.0).sqrt();
    let (ch, cw) = ((h as f64 * cut) as usize, (w as f64 * cut) as usize);
    let cy = rng.random_range(0..h);
    let cx = rng.random_range(0..w);
    let top = cy.saturating_sub(ch / 2);
    let left = cx.saturating_sub(cw / 2);
    let bottom = (cy + ch / 2).min(h);
    let right = (cx + cw / 2).min(w);
    let (height, width) = (bottom - top, right - left);
    Mix::Cutmix {
        lambda: 1.0 - (height * width) as f64 / (h * w) as f64,
        top,
        left,
        height,
        width,
    }
}

/// Applies `mix` to `[b,H,W,C]` images, pairing image `i` with `b − 1 − i`,
/// and blends the (already smoothed) targets with the same `λ`.
pub fn apply_mix(images: &mut Tensor<f32>, targets: &mut Tensor<f32>, mix: &Mix) -> Result<()> {
    let &[b, h, w, c] = images.shape() else {
        return Err(Error::invalid(format!("mixing expects [b,H,W,C], got {:?}", images.shape())));
    };
    let k = targets.shape()[1];
    let src = images.clone();
    let per = h * w * c;
    match *mix {
        Mix::Mixup { lambda } => {
            let l = lambda as f32;
            for i in 0..b {
                let j = b - 1 - i;
                for e in 0..per {
                    images.data_mut()[i * per + e] = l * src.data()[i * per + e] + (1.0 - l) * src.data()[j * per + e];
                }
            }
        }
        Mix::Cutmix {
            top,
            left,
            height,
            width,
            ..
        } => {
            for i in 0..b {
                let j = b - 1 - i;
                for y in top..top + height {
                    let row = (y * w + left) * c;
                    let (dst, from) = (i * per + row, j * per + row);
                    images.data_mut()[dst..dst + width * c].copy_from_slice(&src.data()[from..from + width * c]);
                }
            }
        }
    }
    let l = mix.lambda() as f32;
    let t = targets.clone();
    for i in 0..b {
        let j = b - 1 - i;
        for e in 0..k {
            targets.data_mut()[i * k + e] = l * t.data()[i * k + e] + (1.0 - l) * t.data()[j * k + e];
        }
    }
    Ok(())
}

/// Samples and applies mixup or cutmix (each with probability 1/2 when both
/// are enabled). Returns the mix used, or `None` when both are disabled or
/// the batch has a single image.
pub fn mixup_cutmix(
    images: &mut Tensor<f32>,
    targets: &mut Tensor<f32>,
    alpha_mix: f64,
    alpha_cut: f64,
    rng: &mut impl Rng,
) -> Result<Option<Mix>> {
    let b = images.shape()[0];
    if b < 2 || (alpha_mix <= 0.0 && alpha_cut <= 0.0) {
        return Ok(None);
    }
    let use_cut = match (alpha_mix > 0.0, alpha_cut > 0.0) {
        (true, true) => rng.random_bool(0.5),
        (false, true) => true,
        _ => false,
    };
    let alpha = if use_cut { alpha_cut } else { alpha_mix };
    let lambda = Beta::new(alpha, alpha)
        .map_err(|e| Error::invalid(format!("bad mixing alpha {alpha}: {e}")))?
        .sample(rng);
    let mix = if use_cut {
        let (h, w) = (images.shape()[1], images.shape()[2]);
        cutmix_box(h, w, lambda, rng)
    } else {
        Mix::Mixup { lambda }
    };
    apply_mix(images, targets, &mix)?;
    Ok(Some(mix))
}

/// Class labels of a dataset must fit the classifier.
pub(crate) fn check_classes(ds: &PackedDataset, n_classes: usize) -> Result<()> {
    if ds.n_classes > n_classes {
        return Err(Error::Data(format!(
            "dataset declares {} classes, classifier has {n_classes}",
            ds.n_classes
        )));
    }
    Ok(())
}
