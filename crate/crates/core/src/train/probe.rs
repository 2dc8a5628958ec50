//! Linear probe: affine-free batch normalization followed by a linear
//! classifier, trained on frozen features.

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

pub const PROBE_BN_EPS: f64 = 1e-6;
pub const PROBE_BN_MOMENTUM: f64 = 0.1;

/// Running statistics of an affine-free batch norm over `[n, d]` features.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm {
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub eps: f64,
    pub momentum: f64,
}

impl BatchNorm {
    pub fn new(dim: usize) -> Self {
        Self {
            running_mean: vec![0.0; dim],
            running_var: vec![1.0; dim],
            eps: PROBE_BN_EPS,
            momentum: PROBE_BN_MOMENTUM,
        }
    }

    pub fn dim(&self) -> usize {
        self.running_mean.len()
    }

    /// Normalizes with the batch's own statistics (biased variance) and
    /// folds them into the running estimates (unbiased variance).
    pub fn train_batch<T: Real>(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let (n, d) = self.check(x)?;
        let mut mean = vec![0.0; d];
        let mut var = vec![0.0; d];
        for row in x.data().chunks(d) {
            for (m, &v) in mean.iter_mut().zip(row) {
                *m += v.f64() / n as f64;
            }
        }
        for row in x.data().chunks(d) {
            for ((s, &v), m) in var.iter_mut().zip(row).zip(&mean) {
                *s += (v.f64() - m).powi(2) / n as f64;
            }
        }
        let unbias = if n > 1 { n as f64 / (n - 1) as f64 } else { 1.0 };
        for j in 0..d {
            self.running_mean[j] = (1.0 - self.momentum) * self.running_mean[j] + self.momentum * mean[j];
            self.running_var[j] = (1.0 - self.momentum) * self.running_var[j] + self.momentum * var[j] * unbias;
        }
        Ok(normalize(x, &mean, &var, self.eps))
    }

    /// Normalizes with the running statistics.
    pub fn eval<T: Real>(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.check(x)?;
        Ok(normalize(x, &self.running_mean, &self.running_var, self.eps))
    }

    fn check<T: Real>(&self, x: &Tensor<T>) -> Result<(usize, usize)> {
        match *x.shape() {
            [n, d] if d == self.dim() && n > 0 => Ok((n, d)),
            ref s => Err(Error::shape("batch norm", s, &[0, self.dim()])),
        }
    }
}

fn normalize<T: Real>(x: &Tensor<T>, mean: &[f64], var: &[f64], eps: f64) -> Tensor<T> {
    let d = mean.len();
    let rstd: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
    Tensor::from_fn(x.shape(), |i| T::of((x.data()[i].f64() - mean[i % d]) * rstd[i % d]))
}

/// Batch norm (running statistics) followed by `x·W + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeHead {
    pub norm: BatchNorm,
    /// `[d, k]`.
    pub weight: Tensor<f64>,
    pub bias: Tensor<f64>,
}

/// The same classifier with the normalization absorbed into the weights.
#[derive(Debug, Clone, PartialEq)]
pub struct FoldedProbe {
    pub weight: Tensor<f64>,
    pub bias: Tensor<f64>,
}

fn affine(x: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>) -> Tensor<f64> {
    let (n, d, k) = (x.shape()[0], w.shape()[0], w.shape()[1]);
    Tensor::from_fn(&[n, k], |i| {
        let (r, c) = (i / k, i % k);
        b.data()[c] + (0..d).map(|j| x.data()[r * d + j] * w.data()[j * k + c]).sum::<f64>()
    })
}

impl ProbeHead {
    pub fn logits<T: Real>(&self, features: &Tensor<T>) -> Result<Tensor<f64>> {
        let x = self.norm.eval(&features.cast::<f64>())?;
        Ok(affine(&x, &self.weight, &self.bias))
    }

    /// `W' = W / sqrt(var + eps)` row-wise, `b' = b − mean·W'`.
    pub fn fold(&self) -> FoldedProbe {
        let (d, k) = (self.weight.shape()[0], self.weight.shape()[1]);
        let n = &self.norm;
        let weight = Tensor::from_fn(&[d, k], |i| {
            self.weight.data()[i] / (n.running_var[i / k] + n.eps).sqrt()
        });
        let bias = Tensor::from_fn(&[k], |c| {
            self.bias.data()[c] - (0..d).map(|j| n.running_mean[j] * weight.data()[j * k + c]).sum::<f64>()
        });
        FoldedProbe { weight, bias }
    }
}

impl FoldedProbe {
    pub fn logits<T: Real>(&self, features: &Tensor<T>) -> Result<Tensor<f64>> {
        let x = features.cast::<f64>();
        if x.rank() != 2 || x.shape()[1] != self.weight.shape()[0] {
            return Err(Error::shape("folded probe", x.shape(), self.weight.shape()));
        }
        Ok(affine(&x, &self.weight, &self.bias))
    }
}

/// Index of the largest entry in each row.
pub fn argmax_rows<T: Real>(logits: &Tensor<T>) -> Vec<usize> {
    let k = logits.shape()[1];
    logits
        .data()
        .chunks(k)
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0, T::neg_infinity()), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
                .0
        })
        .collect()
}

pub fn accuracy(pred: &[usize], labels: &[u32]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let hits = pred.iter().zip(labels).filter(|(&p, &l)| p == l as usize).count();
    hits as f64 / labels.len() as f64
}
