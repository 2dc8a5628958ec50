//! Reconstruction targets: raw pixels, per-patch normalized pixels, and PCA
//! coefficients in patch space.

use nalgebra::{DMatrix, SymmetricEigen};

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};
use crate::vit::patchify;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TargetKind {
    RawPixels,
    NormalizedPixels,
    /// Top-`k` principal coefficients.
    Pca(usize),
}

impl TargetKind {
    pub fn dim(&self, patch_dim: usize) -> usize {
        match *self {
            TargetKind::Pca(k) => k,
            _ => patch_dim,
        }
    }
}

/// Mean and top-`k` principal directions of a patch distribution.
#[derive(Debug, Clone, PartialEq)]
pub struct PcaBasis {
    pub mean: Tensor<f64>,
    /// `[k, D]`, orthonormal rows sorted by decreasing variance.
    pub components: Tensor<f64>,
    /// Variance along each component.
    pub explained: Vec<f64>,
}

impl PcaBasis {
    pub fn k(&self) -> usize {
        self.components.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.components.shape()[1]
    }

    /// `(x − mean)·componentsᵀ` for `[.., D]` rows.
    pub fn project<T: Real>(&self, rows: &Tensor<T>) -> Result<Tensor<T>> {
        let (k, dim) = (self.k(), self.dim());
        if rows.shape().last() != Some(&dim) {
            return Err(Error::shape("pca project", rows.shape(), self.components.shape()));
        }
        let comps = self.components.data();
        let mean = self.mean.data();
        let mut out = Vec::with_capacity(rows.len() / dim * k);
        for row in rows.data().chunks(dim) {
            for c in comps.chunks(dim) {
                let dot: f64 = row.iter().zip(mean).zip(c).map(|((&x, &m), &w)| (x.f64() - m) * w).sum();
                out.push(T::of(dot));
            }
        }
        let mut shape = rows.shape().to_vec();
        *shape.last_mut().unwrap() = k;
        Tensor::new(shape, out)
    }

    /// Inverse of [`PcaBasis::project`]: `coeffs·components + mean`.
    pub fn reconstruct<T: Real>(&self, coeffs: &Tensor<T>) -> Result<Tensor<T>> {
        let (k, dim) = (self.k(), self.dim());
        if coeffs.shape().last() != Some(&k) {
            return Err(Error::shape("pca reconstruct", coeffs.shape(), self.components.shape()));
        }
        let comps = self.components.data();
        let mut out = Vec::with_capacity(coeffs.len() / k.max(1) * dim);
        for row in coeffs.data().chunks(k) {
            let mut x = self.mean.data().to_vec();
            for (&a, c) in row.iter().zip(comps.chunks(dim)) {
                for (xi, &ci) in x.iter_mut().zip(c) {
                    *xi += a.f64() * ci;
                }
            }
            out.extend(x.into_iter().map(T::of));
        }
        let mut shape = coeffs.shape().to_vec();
        *shape.last_mut().unwrap() = dim;
        Tensor::new(shape, out)
    }
}

/// Fits a PCA basis to `[m, D]` patch rows via a symmetric eigendecomposition
/// of the sample covariance.
pub fn pca_fit<T: Real>(patches: &Tensor<T>, k: usize) -> Result<PcaBasis> {
    let &[m, dim] = patches.shape() else {
        return Err(Error::invalid(format!("pca_fit expects [m, D] rows, got {:?}", patches.shape())));
    };
    if k == 0 || k > dim {
        return Err(Error::invalid(format!("cannot keep {k} components of {dim}-dimensional patches")));
    }
    if m <= k {
        return Err(Error::invalid(format!("pca_fit needs more than {k} samples, got {m}")));
    }
    let x = DMatrix::from_row_iterator(m, dim, patches.data().iter().map(|v| v.f64()));
    let mean = x.row_mean();
    let centered = DMatrix::from_fn(m, dim, |i, j| x[(i, j)] - mean[j]);
    let cov = centered.transpose() * &centered / (m - 1) as f64;
    let eig = SymmetricEigen::new(cov);

    let mut order: Vec<usize> = (0..dim).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let mut comps = Vec::with_capacity(k * dim);
    let mut explained = Vec::with_capacity(k);
    for &i in &order[..k] {
        let v = eig.eigenvectors.column(i);
        // fix the sign so the largest-magnitude entry is positive
        let pivot = v.iter().copied().fold(0.0f64, |acc, x| if x.abs() > acc.abs() { x } else { acc });
        let sign = if pivot < 0.0 { -1.0 } else { 1.0 };
        comps.extend(v.iter().map(|&x| x * sign));
        explained.push(eig.eigenvalues[i].max(0.0));
    }
    Ok(PcaBasis {
        mean: Tensor::new(vec![dim], mean.iter().copied().collect())?,
        components: Tensor::new(vec![k, dim], comps)?,
        explained,
    })
}

/// Standardizes every row by its own mean and `sqrt(var + eps)`.
pub fn normalize_patches<T: Real>(patches: &Tensor<T>, eps: f64) -> Tensor<T> {
    let dim = *patches.shape().last().unwrap_or(&1);
    let mut out = patches.clone();
    for row in out.data_mut().chunks_mut(dim.max(1)) {
        if row.iter().all(|&v| v == row[0]) {
            row.fill(T::zero());
            continue;
        }
        let n = row.len() as f64;
        let mean = row.iter().map(|v| v.f64()).sum::<f64>() / n;
        let var = row.iter().map(|v| (v.f64() - mean).powi(2)).sum::<f64>() / n;
        let scale = 1.0 / (var + eps).sqrt();
        for v in row {
            *v = T::of((v.f64() - mean) * scale);
        }
    }
    out
}

/// Reconstruction target `[b, n, target_dim]` for `[b,H,W,C]` images.
pub fn build_target<T: Real>(
    images: &Tensor<T>,
    patch_size: usize,
    kind: TargetKind,
    basis: Option<&PcaBasis>,
    eps: f64,
) -> Result<Tensor<T>> {
    let patches = patchify(images, patch_size)?;
    match kind {
        TargetKind::RawPixels => Ok(patches),
        TargetKind::NormalizedPixels => Ok(normalize_patches(&patches, eps)),
        TargetKind::Pca(k) => {
            let basis = basis.ok_or_else(|| Error::invalid("pca target requires a fitted basis"))?;
            if basis.k() != k {
                return Err(Error::invalid(format!("basis has {} components, target wants {k}", basis.k())));
            }
            basis.project(&patches)
        }
    }
}
