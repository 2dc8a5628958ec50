//! Crops, flips, bilinear resizing and per-channel standardization on
//! `[H, W, C]` images.

use rand::Rng;

use super::ChannelStats;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AugmentMode {
    /// Resize the shorter side to the output size, take the center window.
    CenterCrop,
    /// Resize the shorter side to `out / 0.875`, take a random window.
    FixedSizeCrop,
    /// Random resized crop.
    RandomSizeCrop,
}

impl AugmentMode {
    pub fn name(&self) -> &'static str {
        match self {
            AugmentMode::CenterCrop => "center",
            AugmentMode::FixedSizeCrop => "fixed",
            AugmentMode::RandomSizeCrop => "random",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "center" | "none" => Ok(AugmentMode::CenterCrop),
            "fixed" => Ok(AugmentMode::FixedSizeCrop),
            "random" | "rrc" => Ok(AugmentMode::RandomSizeCrop),
            _ => Err(Error::invalid(format!("unknown augmentation mode `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentSpec {
    pub mode: AugmentMode,
    pub flip: bool,
    pub out_size: usize,
    /// Area fraction range for random resized crops.
    pub scale_range: (f64, f64),
    /// Aspect ratio range (width / height) for random resized crops.
    pub ratio_range: (f64, f64),
}

impl AugmentSpec {
    pub fn pretrain(out_size: usize) -> Self {
        Self {
            mode: AugmentMode::RandomSizeCrop,
            flip: true,
            out_size,
            scale_range: (0.2, 1.0),
            ratio_range: (3.0 / 4.0, 4.0 / 3.0),
        }
    }

    pub fn eval(out_size: usize) -> Self {
        Self {
            mode: AugmentMode::CenterCrop,
            flip: false,
            ..Self::pretrain(out_size)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.scale_range;
        if !(0.0 < lo && lo <= hi && hi <= 1.0) {
            return Err(Error::invalid(format!("crop scale range ({lo}, {hi}) must satisfy 0 < lo <= hi <= 1")));
        }
        let (lo, hi) = self.ratio_range;
        if !(0.0 < lo && lo <= hi) {
            return Err(Error::invalid(format!("crop ratio range ({lo}, {hi}) is empty")));
        }
        if self.out_size == 0 {
            return Err(Error::invalid("output size must be positive"));
        }
        Ok(())
    }
}

/// Bytes to `[H,W,C]` floats in `[0, 1]`.
pub fn to_unit(pixels: &[u8], dims: [usize; 3]) -> Result<Tensor<f32>> {
    Tensor::new(dims.to_vec(), pixels.iter().map(|&v| v as f32 / 255.0).collect())
}

fn dims(img: &Tensor<f32>) -> Result<(usize, usize, usize)> {
    match *img.shape() {
        [h, w, c] => Ok((h, w, c)),
        ref s => Err(Error::invalid(format!("expected an [H,W,C] image, got {s:?}"))),
    }
}

/// Window `[top..top+h, left..left+w]`.
pub fn crop(img: &Tensor<f32>, top: usize, left: usize, h: usize, w: usize) -> Result<Tensor<f32>> {
    let (ih, iw, c) = dims(img)?;
    if top + h > ih || left + w > iw {
        return Err(Error::invalid(format!(
            "crop {h}x{w} at ({top},{left}) exceeds {ih}x{iw} image"
        )));
    }
    let mut out = Vec::with_capacity(h * w * c);
    for y in top..top + h {
        let row = (y * iw + left) * c;
        out.extend_from_slice(&img.data()[row..row + w * c]);
    }
    Tensor::new(vec![h, w, c], out)
}

/// Bilinear resampling with half-pixel centers and clamped edges.
pub fn resize_bilinear(img: &Tensor<f32>, out_h: usize, out_w: usize) -> Result<Tensor<f32>> {
    let (h, w, c) = dims(img)?;
    if (h, w) == (out_h, out_w) {
        return Ok(img.clone());
    }
    if h == 0 || w == 0 || out_h == 0 || out_w == 0 {
        return Err(Error::invalid("cannot resize an empty image"));
    }
    let src = img.data();
    let axis = |o: usize, n_in: usize, n_out: usize| {
        let x = ((o as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5).clamp(0.0, (n_in - 1) as f64);
        let i0 = x.floor() as usize;
        let i1 = (i0 + 1).min(n_in - 1);
        (i0, i1, (x - i0 as f64) as f32)
    };
    let cols: Vec<_> = (0..out_w).map(|x| axis(x, w, out_w)).collect();
    let mut out = Vec::with_capacity(out_h * out_w * c);
    for y in 0..out_h {
        let (y0, y1, fy) = axis(y, h, out_h);
        for &(x0, x1, fx) in &cols {
            for ch in 0..c {
                let at = |yy: usize, xx: usize| src[(yy * w + xx) * c + ch];
                let top = at(y0, x0) + (at(y0, x1) - at(y0, x0)) * fx;
                let bottom = at(y1, x0) + (at(y1, x1) - at(y1, x0)) * fx;
                out.push(top + (bottom - top) * fy);
            }
        }
    }
    Tensor::new(vec![out_h, out_w, c], out)
}

/// Resizes so the shorter side equals `side`, keeping the aspect ratio.
pub fn resize_shorter(img: &Tensor<f32>, side: usize) -> Result<Tensor<f32>> {
    let (h, w, _) = dims(img)?;
    let (nh, nw) = if h <= w {
        (side, (w as f64 * side as f64 / h as f64).round() as usize)
    } else {
        ((h as f64 * side as f64 / w as f64).round() as usize, side)
    };
    resize_bilinear(img, nh, nw)
}

/// Deterministic `out×out` window at `(floor((H−out)/2), floor((W−out)/2))`.
pub fn center_crop(img: &Tensor<f32>, out: usize) -> Result<Tensor<f32>> {
    let (h, w, _) = dims(img)?;
    if out > h || out > w {
        return Err(Error::invalid(format!("center crop {out} exceeds {h}x{w} image")));
    }
    crop(img, (h - out) / 2, (w - out) / 2, out, out)
}

/// Mirrors columns.
pub fn flip_columns(img: &Tensor<f32>) -> Tensor<f32> {
    let (h, w, c) = dims(img).expect("image");
    let src = img.data();
    let mut out = Vec::with_capacity(src.len());
    for y in 0..h {
        for x in (0..w).rev() {
            out.extend_from_slice(&src[(y * w + x) * c..(y * w + x + 1) * c]);
        }
    }
    Tensor::new(vec![h, w, c], out).expect("same size")
}

/// Mirrors columns with probability 1/2.
pub fn hflip(img: &Tensor<f32>, rng: &mut impl Rng) -> Tensor<f32> {
    if rng.random_bool(0.5) {
        flip_columns(img)
    } else {
        img.clone()
    }
}

/// Random resized crop: area fraction uniform in `scale`, aspect ratio
/// log-uniform in `ratio`; after 10 failed draws, the largest centered
/// window with aspect clamped into `ratio`.
pub fn random_resized_crop(
    img: &Tensor<f32>,
    out: usize,
    scale: (f64, f64),
    ratio: (f64, f64),
    rng: &mut impl Rng,
) -> Result<Tensor<f32>> {
    let (h, w, _) = dims(img)?;
    let area = (h * w) as f64;
    let (log_lo, log_hi) = (ratio.0.ln(), ratio.1.ln());
    for _ in 0..10 {
        let target = area * rng.random_range(scale.0..=scale.1);
        let aspect = rng.random_range(log_lo..=log_hi).exp();
        let cw = (target * aspect).sqrt().round() as usize;
        let ch = (target / aspect).sqrt().round() as usize;
        if (1..=w).contains(&cw) && (1..=h).contains(&ch) {
            let top = rng.random_range(0..=h - ch);
            let left = rng.random_range(0..=w - cw);
            return resize_bilinear(&crop(img, top, left, ch, cw)?, out, out);
        }
    }
    let in_ratio = w as f64 / h as f64;
    let (cw, ch) = if in_ratio < ratio.0 {
        (w, (w as f64 / ratio.0).round() as usize)
    } else if in_ratio > ratio.1 {
        ((h as f64 * ratio.1).round() as usize, h)
    } else {
        (w, h)
    };
    resize_bilinear(&crop(img, (h - ch) / 2, (w - cw) / 2, ch, cw)?, out, out)
}

/// `(x − mean_c) / std_c` per channel.
pub fn standardize(img: &mut Tensor<f32>, stats: &ChannelStats) {
    let c = stats.mean.len();
    for (i, v) in img.data_mut().iter_mut().enumerate() {
        *v = ((*v as f64 - stats.mean[i % c]) / stats.std[i % c]) as f32;
    }
}

/// Inverse of [`standardize`].
pub fn unstandardize(img: &mut Tensor<f32>, stats: &ChannelStats) {
    let c = stats.mean.len();
    for (i, v) in img.data_mut().iter_mut().enumerate() {
        *v = (*v as f64 * stats.std[i % c] + stats.mean[i % c]) as f32;
    }
}

/// Full pipeline for one stored sample: scale to `[0,1]`, crop per `spec`,
/// optional flip, standardize.
pub fn augment(
    pixels: &[u8],
    dims: [usize; 3],
    spec: &AugmentSpec,
    stats: &ChannelStats,
    rng: &mut impl Rng,
) -> Result<Tensor<f32>> {
    let img = to_unit(pixels, dims)?;
    let out = spec.out_size;
    let mut img = match spec.mode {
        AugmentMode::CenterCrop => {
            let shorter = dims[0].min(dims[1]);
            let img = if shorter == out { img } else { resize_shorter(&img, out)? };
            center_crop(&img, out)?
        }
        AugmentMode::FixedSizeCrop => {
            let img = resize_shorter(&img, (out as f64 / 0.875).ceil() as usize)?;
            let (h, w, _) = self::dims(&img)?;
            let top = rng.random_range(0..=h - out);
            let left = rng.random_range(0..=w - out);
            crop(&img, top, left, out, out)?
        }
        AugmentMode::RandomSizeCrop => random_resized_crop(&img, out, spec.scale_range, spec.ratio_range, rng)?,
    };
    if spec.flip {
        img = hflip(&img, rng);
    }
    standardize(&mut img, stats);
    Ok(img)
}
