//! Procedural desk-scale corpus: oriented stripe textures with random colors,
//! period and phase, an optional occluding rectangle and pixel noise. Class `c` of `k`
//! sets the stripe orientation to `c·π/k`.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::PackedDataset;
use crate::error::{Error, Result};
use crate::rng::{self, Domain};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynthSpec {
    pub count: usize,
    pub size: usize,
    pub n_classes: usize,
    /// Standard deviation of additive pixel noise, in 8-bit units.
    pub noise: f64,
    /// Maximum stripe-angle jitter around the class orientation, radians.
    pub jitter: f64,
    /// Stripe period range in pixels.
    pub period: (f64, f64),
    /// Paint a random solid rectangle over the texture.
    pub occluder: bool,
}

impl SynthSpec {
    pub fn new(count: usize, size: usize, n_classes: usize) -> Self {
        Self {
            count,
            size,
            n_classes,
            noise: 8.0,
            jitter: 0.2,
            period: (8.0, 16.0),
            occluder: false,
        }
    }
}

/// Generates `spec.count` RGB images with balanced labels; image `i` depends
/// only on `(seed, i)`.
pub fn generate(spec: &SynthSpec, seed: u64) -> Result<PackedDataset> {
    if spec.n_classes == 0 || spec.size == 0 {
        return Err(Error::invalid("synthetic corpus needs at least one class and a positive size"));
    }
    let mut ds = PackedDataset::new(spec.size, spec.size, 3, spec.n_classes);
    for i in 0..spec.count {
        let label = (i % spec.n_classes) as u32;
        let mut r = rng::keyed(seed, Domain::Synth, &[i as u64]);
        ds.push(label, &render(spec, label, &mut r))?;
    }
    Ok(ds)
}

fn color(r: &mut impl Rng) -> [f64; 3] {
    [r.random_range(0.0..255.0), r.random_range(0.0..255.0), r.random_range(0.0..255.0)]
}

fn render(spec: &SynthSpec, label: u32, r: &mut impl Rng) -> Vec<u8> {
    let s = spec.size;
    let angle = label as f64 * std::f64::consts::PI / spec.n_classes as f64 + r.random_range(-spec.jitter..=spec.jitter);
    let (dx, dy) = (angle.cos(), angle.sin());
    let period = r.random_range(spec.period.0..spec.period.1);
    let phase = r.random_range(0.0..1.0);
    let (a, b) = (color(r), color(r));

    let occluder = {
        let h = r.random_range(s / 6..=s / 3).max(1);
        let w = r.random_range(s / 6..=s / 3).max(1);
        (r.random_range(0..=s - h), r.random_range(0..=s - w), h, w, color(r))
    };
    let noise = Normal::new(0.0, spec.noise.max(1e-9)).expect("finite noise");

    let mut out = Vec::with_capacity(s * s * 3);
    for y in 0..s {
        for x in 0..s {
            let (top, left, h, w, oc) = occluder;
            let inside = spec.occluder && (top..top + h).contains(&y) && (left..left + w).contains(&x);
            let t = ((x as f64 * dy - y as f64 * dx) / period + phase).rem_euclid(1.0);
            // soft square wave
            let mix = 0.5 + 0.5 * (2.0 * std::f64::consts::PI * t).sin().clamp(-0.7, 0.7) / 0.7;
            for ch in 0..3 {
                let base = if inside { oc[ch] } else { a[ch] * mix + b[ch] * (1.0 - mix) };
                let v = base + noise.sample(r);
                out.push(v.round().clamp(0.0, 255.0) as u8);
            }
        }
    }
    out
}
