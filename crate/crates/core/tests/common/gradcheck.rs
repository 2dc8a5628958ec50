//! Central finite-difference gradient oracle.

use mae_core::{Result, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;

pub fn random(shape: &[usize], rng: &mut impl Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Relative error with a small absolute floor so that vanishing gradients do
/// not divide by zero.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-3)
}

/// Builds `L = Σ w ⊙ f(inputs)` with a fixed random weighting `w`, then
/// compares the tape gradient of every input against central differences.
/// Returns the largest relative error seen.
pub fn max_rel_error<F>(inputs: &[Tensor<f64>], seed: u64, f: F) -> f64
where
    F: for<'t> Fn(&'t Tape<f64>, &[Var<'t, f64>]) -> Result<Var<'t, f64>>,
{
    let weights = {
        let tape = Tape::new();
        let vars: Vec<_> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&tape, &vars).expect("forward");
        let shape = out.shape();
        let mut r = rng(seed ^ 0xabcdef);
        random(&shape, &mut r)
    };

    let loss_of = |xs: &[Tensor<f64>]| -> f64 {
        let tape = Tape::new();
        let vars: Vec<_> = xs.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&tape, &vars).expect("forward");
        out.mul_const(weights.clone()).unwrap().sum().value().item()
    };

    let tape = Tape::new();
    let vars: Vec<_> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = f(&tape, &vars).expect("forward");
    let loss = out.mul_const(weights.clone()).unwrap().sum();
    let grads = tape.backward(loss).expect("backward");

    let mut worst = 0.0f64;
    for (which, input) in inputs.iter().enumerate() {
        let analytic = grads.wrt(vars[which]);
        for i in 0..input.len() {
            let mut plus = inputs.to_vec();
            plus[which].data_mut()[i] += STEP;
            let mut minus = inputs.to_vec();
            minus[which].data_mut()[i] -= STEP;
            let numeric = (loss_of(&plus) - loss_of(&minus)) / (2.0 * STEP);
            worst = worst.max(rel_err(analytic.data()[i], numeric));
        }
    }
    worst
}
