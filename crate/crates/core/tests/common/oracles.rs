//! Independent reference computations used to freeze expected values.

use mae_core::Tensor;

pub fn matmul_triple_loop(a: &Tensor<f64>, b: &Tensor<f64>) -> Vec<f64> {
    let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            let mut s = 0.0;
            for t in 0..k {
                s += a.at(&[i, t]) * b.at(&[t, j]);
            }
            out[i * n + j] = s;
        }
    }
    out
}

/// Standard normal CDF by Simpson quadrature of the density on [-12, x].
pub fn normal_cdf_quadrature(x: f64) -> f64 {
    let lo = -12.0;
    let steps = 20_000;
    let h = (x - lo) / steps as f64;
    let pdf = |t: f64| (-0.5 * t * t).exp() / (2.0 * std::f64::consts::PI).sqrt();
    let mut s = pdf(lo) + pdf(x);
    for i in 1..steps {
        let t = lo + i as f64 * h;
        s += if i % 2 == 1 { 4.0 } else { 2.0 } * pdf(t);
    }
    s * h / 3.0
}

/// Leading eigenvectors of a symmetric matrix by power iteration with
/// deflation. Rows of the result are unit vectors.
pub fn power_iteration(cov: &[Vec<f64>], k: usize, iters: usize) -> Vec<Vec<f64>> {
    let d = cov.len();
    let mut a: Vec<Vec<f64>> = cov.to_vec();
    let mut out = Vec::new();
    for c in 0..k {
        let mut v: Vec<f64> = (0..d).map(|i| 1.0 + ((i * 7 + c * 3) % 11) as f64 * 0.1).collect();
        let mut lambda = 0.0;
        for _ in 0..iters {
            let w: Vec<f64> = (0..d).map(|i| (0..d).map(|j| a[i][j] * v[j]).sum()).collect();
            let norm = w.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm == 0.0 {
                break;
            }
            lambda = norm;
            v = w.into_iter().map(|x| x / norm).collect();
        }
        for i in 0..d {
            for j in 0..d {
                a[i][j] -= lambda * v[i] * v[j];
            }
        }
        out.push(v);
    }
    out
}
