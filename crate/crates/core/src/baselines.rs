//! Prospective logistic regression on the pooled case-control sample.
//!
//! The slopes are consistent under case-control sampling; the intercept is
//! shifted by `log(n1/n0) - log(P(Y=1)/P(Y=0))`.

use nalgebra::{DMatrix, DVector};

use crate::el::SolverConfig;
use crate::error::{Error, Result};
use crate::linalg::spd_inverse;
use crate::model::sigmoid;
use crate::Sample;

/// Largest `|alpha + beta'x|` tolerated before the fit is declared separated.
const SEPARATION_ETA: f64 = 30.0;

#[derive(Debug, Clone, PartialEq)]
pub struct MleResult {
    pub alpha: f64,
    pub beta: DVector<f64>,
    /// Standard errors of `(alpha, beta)` from the inverse observed information.
    pub se: DVector<f64>,
    pub covariance: DMatrix<f64>,
    /// `n1 / n`, the case proportion a single case-control sample reports.
    pub naive_case_prop: f64,
    pub log_likelihood: f64,
    pub iterations: usize,
    /// `max |score|` at the returned coefficients.
    pub score_norm: f64,
}

fn fill_design_row(x: &DMatrix<f64>, i: usize, z: &mut [f64]) {
    z[0] = 1.0;
    for j in 0..x.ncols() {
        z[1 + j] = x[(i, j)];
    }
}

fn log_likelihood(sample: &Sample, coef: &DVector<f64>) -> (f64, f64) {
    let x = sample.covariates();
    let mut ll = 0.0;
    let mut max_eta = 0.0f64;
    let mut z = vec![0.0; coef.len()];
    for (i, &y) in sample.outcomes().iter().enumerate() {
        fill_design_row(x, i, &mut z);
        let eta: f64 = z.iter().zip(coef.iter()).map(|(a, b)| a * b).sum();
        max_eta = max_eta.max(eta.abs());
        // log(1 + e^eta) without overflow
        let softplus = if eta > 0.0 { eta + (-eta).exp().ln_1p() } else { eta.exp().ln_1p() };
        ll += f64::from(y) * eta - softplus;
    }
    (ll, max_eta)
}

/// Newton-Raphson with step halving on the prospective log-likelihood.
pub fn fit_prospective_mle(sample: &Sample, cfg: &SolverConfig) -> Result<MleResult> {
    let max_iters = cfg.max_inner_iters;
    let (n, p) = (sample.n(), sample.p());
    let x = sample.covariates();
    let y = sample.outcomes();
    let k = p + 1;
    let mut coef = DVector::zeros(k);
    let prop = sample.n1() as f64 / n as f64;
    coef[0] = (prop / (1.0 - prop)).ln();
    let (mut ll, _) = log_likelihood(sample, &coef);

    let mut iterations = 0;
    loop {
        let mut score = DVector::zeros(k);
        let mut info = DMatrix::zeros(k, k);
        let mut z = vec![0.0; k];
        for i in 0..n {
            fill_design_row(x, i, &mut z);
            let eta: f64 = z.iter().zip(coef.iter()).map(|(a, b)| a * b).sum();
            let pr = sigmoid(eta);
            let resid = f64::from(y[i]) - pr;
            let wgt = pr * (1.0 - pr);
            for a in 0..k {
                score[a] += resid * z[a];
                for b in 0..=a {
                    info[(a, b)] += wgt * z[a] * z[b];
                }
            }
        }
        for a in 0..k {
            for b in 0..a {
                info[(b, a)] = info[(a, b)];
            }
        }
        let score_norm = score.amax();
        if score_norm <= 1e-10 * n as f64 {
            let covariance = spd_inverse(&info, "logistic information")?;
            let se = covariance.diagonal().map(f64::sqrt);
            return Ok(MleResult {
                alpha: coef[0],
                beta: coef.rows(1, p).into_owned(),
                se,
                covariance,
                naive_case_prop: prop,
                log_likelihood: ll,
                iterations,
                score_norm,
            });
        }
        if iterations >= max_iters {
            return Err(Error::OuterNonConvergence {
                iterations,
                grad_norm: score_norm,
                best: coef.iter().copied().collect(),
            });
        }
        iterations += 1;
        let step = match info.clone().cholesky() {
            Some(ch) => ch.solve(&score),
            None => return Err(Error::Separation),
        };
        let mut t = 1.0;
        loop {
            let cand = &coef + &step * t;
            let (cand_ll, max_eta) = log_likelihood(sample, &cand);
            if max_eta > SEPARATION_ETA {
                return Err(Error::Separation);
            }
            if cand_ll >= ll - 1e-12 * ll.abs() {
                coef = cand;
                ll = cand_ll;
                break;
            }
            t *= 0.5;
            if t < 1e-12 {
                return Err(Error::OuterNonConvergence {
                    iterations,
                    grad_norm: score_norm,
                    best: coef.iter().copied().collect(),
                });
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn symmetric_two_point_data_has_zero_intercept() {
        // cases at x and -x in equal numbers, same for controls
        let xs = [1.0, -1.0, 1.0, -1.0, 1.0, -1.0, 1.0, -1.0];
        let ys = [1, 1, 1, 1, 0, 0, 0, 0];
        let x = DMatrix::from_column_slice(8, 1, &xs);
        let s = Sample::new(ys.to_vec(), x).unwrap();
        let fit = fit_prospective_mle(&s, &SolverConfig::default()).unwrap();
        assert!(fit.alpha.abs() < 1e-12);
        assert!(fit.beta[0].abs() < 1e-12);
        assert_eq!(fit.naive_case_prop, 0.5);
    }

    #[test]
    fn fitted_probabilities_average_to_case_share() {
        let xs = [0.3, -1.2, 2.0, 0.7, -0.4, 1.1, -2.2, 0.1, 0.9, -0.8, 1.6, -0.1];
        let ys = [1, 0, 1, 1, 0, 0, 0, 1, 1, 0, 0, 1];
        let s = Sample::new(ys.to_vec(), DMatrix::from_column_slice(12, 1, &xs)).unwrap();
        let fit = fit_prospective_mle(&s, &SolverConfig::default()).unwrap();
        let mean: f64 = xs.iter().map(|&x| sigmoid(fit.alpha + fit.beta[0] * x)).sum::<f64>() / 12.0;
        assert_relative_eq!(mean, 0.5, epsilon = 1e-10);
    }

    #[test]
    fn separation_is_reported() {
        let xs = [-2.0, -1.5, -1.0, -0.5, 0.5, 1.0, 1.5, 2.0];
        let ys = [0, 0, 0, 0, 1, 1, 1, 1];
        let s = Sample::new(ys.to_vec(), DMatrix::from_column_slice(8, 1, &xs)).unwrap();
        assert!(matches!(fit_prospective_mle(&s, &SolverConfig::default()), Err(Error::Separation)));
    }
}
