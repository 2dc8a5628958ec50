//! Vanilla vision transformer pieces shared by the MAE encoder, the MAE
//! decoder and the classifier used for fine-tuning.
//!
//! Parameter names follow a fixed scheme so that checkpoints, freezing and
//! layer-wise learning-rate decay can all work from names alone:
//!
//! ```text
//! encoder.patch_embed.{weight,bias}
//! encoder.cls_token
//! encoder.blocks.{i}.{norm1,attn.q,attn.k,attn.v,attn.proj,norm2,mlp.fc1,mlp.fc2}.{weight,bias}
//! encoder.norm.{weight,bias}
//! head.{weight,bias}
//! ```

mod params;

use rand::Rng;

use crate::error::{Error, Result};
use crate::rng::StreamRng;
use crate::tensor::{Real, Tensor, Var};

pub use params::{normal, xavier_uniform, Bound, Params, CHECKPOINT_MAGIC};
pub(crate) use params::{init_linear, init_norm};

pub const ENCODER: &str = "encoder";
pub const HEAD: &str = "head";
pub const LN_EPS: f64 = 1e-6;

/// Encoder architecture.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ViTConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub channels: usize,
    pub depth: usize,
    pub width: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
}

impl ViTConfig {
    /// 32×32 images, 4×4 patches (64 of them), 4 blocks of width 64.
    pub const fn tiny_desk() -> Self {
        Self {
            image_size: 32,
            patch_size: 4,
            channels: 3,
            depth: 4,
            width: 64,
            heads: 4,
            mlp_ratio: 4,
        }
    }

    pub const fn base() -> Self {
        Self::at_224(12, 768, 12)
    }

    pub const fn large() -> Self {
        Self::at_224(24, 1024, 16)
    }

    /// ViT-H/14.
    pub const fn huge() -> Self {
        Self {
            patch_size: 14,
            ..Self::at_224(32, 1280, 16)
        }
    }

    const fn at_224(depth: usize, width: usize, heads: usize) -> Self {
        Self {
            image_size: 224,
            patch_size: 16,
            channels: 3,
            depth,
            width,
            heads,
            mlp_ratio: 4,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || self.image_size % self.patch_size != 0 {
            return Err(Error::invalid(format!(
                "image size {} is not divisible by patch size {}",
                self.image_size, self.patch_size
            )));
        }
        if self.heads == 0 || self.width % self.heads != 0 {
            return Err(Error::invalid(format!(
                "width {} is not divisible by {} heads",
                self.width, self.heads
            )));
        }
        if self.width % 2 != 0 {
            return Err(Error::invalid("width must be even for sine-cosine embeddings"));
        }
        Ok(())
    }

    pub fn grid_side(&self) -> usize {
        self.image_size / self.patch_size
    }

    /// Patch count N.
    pub fn n_patches(&self) -> usize {
        self.grid_side() * self.grid_side()
    }

    /// Values per patch, `p·p·C`.
    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }
}

/// Splits `[H,W,C]` (or `[b,H,W,C]`) into `[N, p·p·C]` (or `[b,N,p·p·C]`)
/// rows: patches in row-major grid order, each flattened in raster order.
pub fn patchify<T: Real>(images: &Tensor<T>, p: usize) -> Result<Tensor<T>> {
    let (batch, h, w, c, batched) = match images.shape() {
        &[h, w, c] => (1, h, w, c, false),
        &[b, h, w, c] => (b, h, w, c, true),
        s => return Err(Error::invalid(format!("patchify expects [H,W,C] or [b,H,W,C], got {s:?}"))),
    };
    if p == 0 || h % p != 0 || w % p != 0 {
        return Err(Error::invalid(format!("image {h}x{w} is not divisible into {p}x{p} patches")));
    }
    let (gh, gw) = (h / p, w / p);
    let dim = p * p * c;
    let src = images.data();
    let mut out = Vec::with_capacity(images.len());
    for b in 0..batch {
        let base = b * h * w * c;
        for gy in 0..gh {
            for gx in 0..gw {
                for py in 0..p {
                    let row = base + ((gy * p + py) * w + gx * p) * c;
                    out.extend_from_slice(&src[row..row + p * c]);
                }
            }
        }
    }
    let shape = if batched { vec![batch, gh * gw, dim] } else { vec![gh * gw, dim] };
    Tensor::new(shape, out)
}

/// Inverse of [`patchify`] for a `grid = (rows, cols)` patch grid.
pub fn unpatchify<T: Real>(patches: &Tensor<T>, p: usize, grid: (usize, usize)) -> Result<Tensor<T>> {
    let (batch, n, dim, batched) = match patches.shape() {
        &[n, d] => (1, n, d, false),
        &[b, n, d] => (b, n, d, true),
        s => return Err(Error::invalid(format!("unpatchify expects [N,D] or [b,N,D], got {s:?}"))),
    };
    let (gh, gw) = grid;
    if n != gh * gw {
        return Err(Error::invalid(format!("{n} patches do not fill a {gh}x{gw} grid")));
    }
    if p == 0 || dim % (p * p) != 0 {
        return Err(Error::invalid(format!("patch width {dim} is not a multiple of {p}x{p}")));
    }
    let c = dim / (p * p);
    let (h, w) = (gh * p, gw * p);
    let mut out = vec![T::zero(); batch * h * w * c];
    let src = patches.data();
    for b in 0..batch {
        for gy in 0..gh {
            for gx in 0..gw {
                let patch = &src[(b * n + gy * gw + gx) * dim..][..dim];
                for py in 0..p {
                    let row = b * h * w * c + ((gy * p + py) * w + gx * p) * c;
                    out[row..row + p * c].copy_from_slice(&patch[py * p * c..(py + 1) * p * c]);
                }
            }
        }
    }
    let shape = if batched { vec![batch, h, w, c] } else { vec![h, w, c] };
    Tensor::new(shape, out)
}

/// Fixed 1-D sine-cosine table: row `q` holds `sin(q·ω_i)` for
/// `i < d/2` followed by `cos(q·ω_i)`, with `ω_i = 10000^(-2i/d)`.
pub fn sincos_pos_embed<T: Real>(n_positions: usize, d: usize) -> Result<Tensor<T>> {
    if d % 2 != 0 {
        return Err(Error::invalid(format!("sine-cosine embedding width {d} must be even")));
    }
    let half = d / 2;
    let mut data = Vec::with_capacity(n_positions * d);
    for q in 0..n_positions {
        let angle = |i: usize| q as f64 / 10000f64.powf(2.0 * i as f64 / d as f64);
        data.extend((0..half).map(|i| T::of(angle(i).sin())));
        data.extend((0..half).map(|i| T::of(angle(i).cos())));
    }
    Tensor::new(vec![n_positions, d], data)
}

/// `x·W + b` over the last axis of `x`.
pub fn linear<'t, T: Real>(x: Var<'t, T>, p: &Bound<'t, T>, prefix: &str) -> Result<Var<'t, T>> {
    let w = p.get(&format!("{prefix}.weight"))?;
    let b = p.get(&format!("{prefix}.bias"))?;
    let shape = x.shape();
    let (inp, out) = {
        let ws = w.shape();
        (ws[0], ws[1])
    };
    if shape.last() != Some(&inp) {
        return Err(Error::shape("linear", &shape, &w.shape()));
    }
    let rows = shape.iter().product::<usize>() / inp.max(1);
    let y = x.reshape(&[rows, inp])?.matmul(w)?.add_trailing(b)?;
    let mut out_shape = shape;
    *out_shape.last_mut().unwrap() = out;
    y.reshape(&out_shape)
}

pub fn layer_norm<'t, T: Real>(x: Var<'t, T>, p: &Bound<'t, T>, prefix: &str) -> Result<Var<'t, T>> {
    x.layer_norm(
        p.get(&format!("{prefix}.weight"))?,
        p.get(&format!("{prefix}.bias"))?,
        LN_EPS,
    )
}

/// Multi-head self-attention on `[b, T, d]`; returns the projected output and
/// the attention weights `[b·heads, T, T]`.
pub fn self_attention<'t, T: Real>(
    x: Var<'t, T>,
    p: &Bound<'t, T>,
    prefix: &str,
    heads: usize,
) -> Result<(Var<'t, T>, Var<'t, T>)> {
    let shape = x.shape();
    let &[b, t, d] = shape.as_slice() else {
        return Err(Error::invalid(format!("attention expects [b,T,d], got {shape:?}")));
    };
    if heads == 0 || d % heads != 0 {
        return Err(Error::invalid(format!("width {d} cannot be split into {heads} heads")));
    }
    let dh = d / heads;
    let split = |v: Var<'t, T>| -> Result<Var<'t, T>> {
        v.reshape(&[b, t, heads, dh])?
            .permute(&[0, 2, 1, 3])?
            .reshape(&[b * heads, t, dh])
    };
    let q = split(linear(x, p, &format!("{prefix}.q"))?)?;
    let k = split(linear(x, p, &format!("{prefix}.k"))?)?;
    let v = split(linear(x, p, &format!("{prefix}.v"))?)?;
    let scale = T::of(1.0 / (dh as f64).sqrt());
    let weights = q.bmm(k.transpose()?)?.scale(scale).softmax();
    let mixed = weights
        .bmm(v)?
        .reshape(&[b, heads, t, dh])?
        .permute(&[0, 2, 1, 3])?
        .reshape(&[b, t, d])?;
    Ok((linear(mixed, p, &format!("{prefix}.proj"))?, weights))
}

/// Stochastic depth for one forward pass: residual branches are dropped per
/// sample with probability `rate`.
pub struct DropPath<'a> {
    pub rate: f64,
    pub rng: &'a mut StreamRng,
}

fn residual<'t, T: Real>(x: Var<'t, T>, branch: Var<'t, T>, drop: &mut Option<DropPath<'_>>) -> Result<Var<'t, T>> {
    match drop {
        Some(dp) if dp.rate > 0.0 => x.add(branch.drop_samples(dp.rate, dp.rng)?),
        _ => x.add(branch),
    }
}

/// Pre-norm block: `x + MHSA(LN(x))`, then `+ MLP(LN(·))`.
pub fn transformer_block<'t, T: Real>(
    x: Var<'t, T>,
    p: &Bound<'t, T>,
    prefix: &str,
    heads: usize,
    drop: &mut Option<DropPath<'_>>,
) -> Result<Var<'t, T>> {
    let h = layer_norm(x, p, &format!("{prefix}.norm1"))?;
    let (attn, _) = self_attention(h, p, &format!("{prefix}.attn"), heads)?;
    let x = residual(x, attn, drop)?;
    let h = layer_norm(x, p, &format!("{prefix}.norm2"))?;
    let h = linear(h, p, &format!("{prefix}.mlp.fc1"))?.gelu();
    let h = linear(h, p, &format!("{prefix}.mlp.fc2"))?;
    residual(x, h, drop)
}

pub fn init_block<T: Real>(params: &mut Params<T>, prefix: &str, width: usize, mlp_ratio: usize, rng: &mut impl Rng) {
    init_norm(params, &format!("{prefix}.norm1"), width);
    for proj in ["q", "k", "v", "proj"] {
        init_linear(params, &format!("{prefix}.attn.{proj}"), width, width, rng);
    }
    init_norm(params, &format!("{prefix}.norm2"), width);
    init_linear(params, &format!("{prefix}.mlp.fc1"), width, width * mlp_ratio, rng);
    init_linear(params, &format!("{prefix}.mlp.fc2"), width * mlp_ratio, width, rng);
}

/// Patch embedding, class token, blocks and final norm under `encoder.`.
pub fn init_encoder<T: Real>(params: &mut Params<T>, cfg: &ViTConfig, rng: &mut impl Rng) {
    init_linear(params, &format!("{ENCODER}.patch_embed"), cfg.patch_dim(), cfg.width, rng);
    params.insert(format!("{ENCODER}.cls_token"), Tensor::zeros(&[cfg.width]));
    for i in 0..cfg.depth {
        init_block(params, &format!("{ENCODER}.blocks.{i}"), cfg.width, cfg.mlp_ratio, rng);
    }
    init_norm(params, &format!("{ENCODER}.norm"), cfg.width);
}

pub fn init_classifier<T: Real>(cfg: &ViTConfig, n_classes: usize, rng: &mut impl Rng) -> Params<T> {
    let mut params = Params::new();
    init_encoder(&mut params, cfg, rng);
    init_linear(&mut params, HEAD, cfg.width, n_classes, rng);
    params
}

/// Linear patch embedding plus positional rows `1..=N`: `[b,N,D] → [b,N,d]`.
pub(crate) fn embed_patches<'t, T: Real>(
    patches: Var<'t, T>,
    p: &Bound<'t, T>,
    pos_patch: Var<'t, T>,
) -> Result<Var<'t, T>> {
    linear(patches, p, &format!("{ENCODER}.patch_embed"))?.add_trailing(pos_patch)
}

/// Class token (with positional row 0) prepended to `[b,L,d]` tokens.
pub(crate) fn prepend_cls<'t, T: Real>(
    tokens: Var<'t, T>,
    cls: Var<'t, T>,
    pos_cls: Var<'t, T>,
) -> Result<Var<'t, T>> {
    let shape = tokens.shape();
    let (b, d) = (shape[0], shape[2]);
    let cls = cls.add(pos_cls)?.reshape(&[1, d])?.gather_rows(&vec![0; b])?.reshape(&[b, 1, d])?;
    Var::concat(&[cls, tokens], 1)
}

/// Splits an `[N+1, d]` positional table into its class row and patch rows.
pub(crate) fn split_pos<T: Real>(table: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
    let n = table.shape()[0];
    let cls = table.gather_rows(&[0])?;
    let d = cls.len();
    let rest: Vec<usize> = (1..n).collect();
    Ok((cls.reshape(&[d])?, table.gather_rows(&rest)?))
}

pub(crate) fn run_blocks<'t, T: Real>(
    mut x: Var<'t, T>,
    p: &Bound<'t, T>,
    prefix: &str,
    depth: usize,
    heads: usize,
    drop_path_rate: f64,
    drop_rng: Option<&mut StreamRng>,
) -> Result<Var<'t, T>> {
    let mut rng = drop_rng;
    for i in 0..depth {
        // stochastic depth rate grows linearly with block index
        let rate = if depth > 1 {
            drop_path_rate * i as f64 / (depth - 1) as f64
        } else {
            drop_path_rate
        };
        let mut drop = match rng.as_deref_mut() {
            Some(r) if rate > 0.0 => Some(DropPath { rate, rng: r }),
            _ => None,
        };
        x = transformer_block(x, p, &format!("{prefix}.{i}"), heads, &mut drop)?;
    }
    Ok(x)
}

/// Full-sequence encoding of `[b,N,D]` patch rows: `[b, N+1, d]` after the
/// final norm.
pub fn encode_tokens<'t, T: Real>(
    patches: Var<'t, T>,
    p: &Bound<'t, T>,
    cfg: &ViTConfig,
    drop_path_rate: f64,
    drop_rng: Option<&mut StreamRng>,
) -> Result<Var<'t, T>> {
    let tape = patches.tape();
    let (pos_cls, pos_patch) = split_pos(&sincos_pos_embed::<T>(cfg.n_patches() + 1, cfg.width)?)?;
    let x = embed_patches(patches, p, tape.constant(pos_patch))?;
    let x = prepend_cls(x, p.get(&format!("{ENCODER}.cls_token"))?, tape.constant(pos_cls))?;
    let x = run_blocks(
        x,
        p,
        &format!("{ENCODER}.blocks"),
        cfg.depth,
        cfg.heads,
        drop_path_rate,
        drop_rng,
    )?;
    layer_norm(x, p, &format!("{ENCODER}.norm"))
}

/// Rows `[b, d]` of the class-token position of `[b, T, d]` tokens.
pub fn class_token<'t, T: Real>(tokens: Var<'t, T>) -> Result<Var<'t, T>> {
    let shape = tokens.shape();
    let (b, t, d) = (shape[0], shape[1], shape[2]);
    let rows: Vec<usize> = (0..b).map(|i| i * t).collect();
    tokens.reshape(&[b * t, d])?.gather_rows(&rows)
}

/// Logits `[b, n_classes]` for `[b,H,W,C]` images.
pub fn vit_classify<'t, T: Real>(
    images: &Tensor<T>,
    p: &Bound<'t, T>,
    cfg: &ViTConfig,
    drop_path_rate: f64,
    drop_rng: Option<&mut StreamRng>,
) -> Result<Var<'t, T>> {
    let tape = p.get(&format!("{ENCODER}.cls_token"))?.tape();
    let patches = tape.constant(patchify(images, cfg.patch_size)?);
    let tokens = encode_tokens(patches, p, cfg, drop_path_rate, drop_rng)?;
    linear(class_token(tokens)?, p, HEAD)
}
