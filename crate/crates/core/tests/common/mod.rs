#![allow(dead_code)]

use ccel::model::ConstraintSpec;
use ccel::{Sample, Theta};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;

/// Cases have covariates shifted by `shift`, controls are standard normal.
pub fn shifted_sample(seed: u64, n1: usize, n0: usize, p: usize, shift: f64) -> Sample {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let n = n1 + n0;
    let mut x = DMatrix::zeros(n, p);
    for i in 0..n {
        for j in 0..p {
            let z: f64 = rng.sample(StandardNormal);
            x[(i, j)] = z + if i < n1 { shift / (j + 1) as f64 } else { 0.0 };
        }
    }
    let mut y = vec![1u8; n1];
    y.extend(std::iter::repeat_n(0u8, n0));
    Sample::new(y, x).unwrap()
}

pub fn uniform(rng: &mut ChaCha20Rng, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * rng.random::<f64>()
}

/// `exp(alpha_star + beta'x)` computed directly.
pub fn tilt(theta: &Theta, x: &[f64]) -> f64 {
    (theta.alpha_star + theta.beta.iter().zip(x).map(|(b, v)| b * v).sum::<f64>()).exp()
}

/// Residuals of the three EL constraints under `weights`: total mass, tilted
/// mass and the mixture mean of `h` against `mu`.
pub fn constraint_residual(theta: &Theta, weights: &[f64], sample: &Sample, spec: &ConstraintSpec<f64>) -> f64 {
    let pi = 1.0 / (1.0 + theta.gamma.exp());
    let mut mass = 0.0;
    let mut tilted = 0.0;
    let mut mean = DVector::zeros(theta.q());
    for (i, &w) in weights.iter().enumerate() {
        let x = sample.row(i);
        let d = tilt(theta, &x);
        mass += w;
        tilted += w * d;
        mean += spec.apply(&x) * (w * (pi * d + 1.0 - pi));
    }
    let mut worst = (mass - 1.0).abs().max((tilted - 1.0).abs());
    for k in 0..theta.q() {
        worst = worst.max((mean[k] - theta.mu[k]).abs());
    }
    worst
}
