//! Plug-in asymptotic covariance, the iterated optimal-weight refit and Wald
//! intervals.
//!
//! All expectations under the control distribution are replaced by averages
//! over the control rows of the internal sample, evaluated at the fitted
//! parameter. Block matrices use the row order `(gamma, alpha_star, beta, mu)`
//! and the column order `(alpha_star, beta, mu, nu)`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::el::{fit_known_mu, fit_mele, fit_mele_from, FitResult, FitWeighting, SolverConfig};
use crate::error::{Error, Result};
use crate::linalg::{asymmetry, spd_inverse, symmetrize};
use crate::model::{case_proportion, ConstraintSpec, WeightSpec};
use crate::{External, Sample, Theta};

/// Diagonal entries of a covariance estimate below `-NEG_TOL` are an error.
const NEG_TOL: f64 = 1e-10;

/// Refit rounds allowed by [`algorithm1`].
pub const MAX_REFITS: usize = 20;

/// Sup-norm change in the estimate below which the refit loop stops.
pub const REFIT_TOL: f64 = 1e-8;

/// Weighted second moment of `h` about `mu_tilde` under the fitted population
/// distribution, a consistent estimate of the covariance of `h(X)`.
pub fn estimate_vhat(
    fit: &FitResult,
    sample: &Sample,
    spec: &ConstraintSpec<f64>,
    mu_tilde: &DVector<f64>,
) -> Result<DMatrix<f64>> {
    if !fit.converged {
        return Err(Error::invalid("covariance needs a converged fit"));
    }
    vhat_at(&fit.theta, &fit.weights, sample, spec, mu_tilde)
}

fn vhat_at(
    theta: &Theta,
    weights: &[f64],
    sample: &Sample,
    spec: &ConstraintSpec<f64>,
    mu_tilde: &DVector<f64>,
) -> Result<DMatrix<f64>> {
    let q = spec.q();
    if mu_tilde.len() != q || weights.len() != sample.n() {
        return Err(Error::invalid("dimension mismatch in covariance estimate"));
    }
    let w = case_proportion(theta.gamma);
    let hm = spec.h_matrix(sample.covariates());
    let mut v = DMatrix::zeros(q, q);
    let mut r = DVector::zeros(q);
    for i in 0..sample.n() {
        let delta = row_tilt(sample, i, theta);
        // (delta + e^gamma) / (1 + e^gamma)
        let mix = delta * w + (1.0 - w);
        for k in 0..q {
            r[k] = hm[(i, k)] - mu_tilde[k];
        }
        v.ger(mix * weights[i], &r, &r, 1.0);
    }
    Ok(symmetrize(&v))
}

fn row_tilt(sample: &Sample, i: usize, theta: &Theta) -> f64 {
    let x = sample.covariates();
    let s = (0..sample.p()).fold(theta.alpha_star, |acc, j| acc + theta.beta[j] * x[(i, j)]);
    crate::model::tilt_from_log(s).value
}

/// Which covariance formula to evaluate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CovForm {
    /// Sandwich form valid for any fixed weighting matrix.
    GeneralW,
    /// Simplified form when the weighting matrix estimates the covariance of `h(X)`.
    OptimalV,
    /// Known `mu`; covers `(gamma, alpha_star, beta)` only.
    InternalI,
}

/// Plug-in blocks of the asymptotic covariance.
///
/// `a44` and `d` are absent for the known-`mu` estimator, whose `u`, `m`
/// and `j` then cover `(gamma, alpha_star, beta)` only.
#[derive(Debug, Clone, PartialEq)]
pub struct AsymptoticBlocks {
    pub p: usize,
    pub q: usize,
    pub rho: f64,
    pub n: usize,
    pub a15: DVector<f64>,
    pub a22: f64,
    pub a23: DVector<f64>,
    pub a25: DVector<f64>,
    pub a33: DMatrix<f64>,
    pub a35: DMatrix<f64>,
    pub a44: Option<DMatrix<f64>>,
    pub a45: DMatrix<f64>,
    pub a55: DMatrix<f64>,
    pub u: DMatrix<f64>,
    pub m: DMatrix<f64>,
    pub j: DMatrix<f64>,
    pub c: DVector<f64>,
    pub d: Option<DMatrix<f64>>,
    pub vhat: Option<DMatrix<f64>>,
    /// Largest `|J - J'|` before symmetrization.
    pub j_asymmetry: f64,
    m_inv: DMatrix<f64>,
}

impl AsymptoticBlocks {
    pub fn is_internal(&self) -> bool {
        self.a44.is_none()
    }

    pub fn m_inverse(&self) -> &DMatrix<f64> {
        &self.m_inv
    }
}

/// Blocks at the fitted parameter of `fit`. The weighting stored in the fit
/// decides between the penalized and known-`mu` layouts.
pub fn assemble_blocks(fit: &FitResult, sample: &Sample, spec: &ConstraintSpec<f64>) -> Result<AsymptoticBlocks> {
    if !fit.converged {
        return Err(Error::invalid("covariance needs a converged fit"));
    }
    assemble_blocks_at(&fit.theta, &fit.weights, sample, spec, &fit.weighting)
}

/// [`assemble_blocks`] at an arbitrary parameter with the given EL weights.
pub fn assemble_blocks_at(
    theta: &Theta,
    weights: &[f64],
    sample: &Sample,
    spec: &ConstraintSpec<f64>,
    weighting: &FitWeighting,
) -> Result<AsymptoticBlocks> {
    let (p, q) = (sample.p(), spec.q());
    if theta.p() != p || theta.q() != q || spec.p() != p {
        return Err(Error::invalid("parameter, sample and constraint dimensions disagree"));
    }
    let r = 1 + q;
    let rho = sample.rho();
    let n0 = sample.n0() as f64;
    let w = case_proportion(theta.gamma);
    let w1 = w * (1.0 - w);
    let x = sample.covariates();

    let mut a15 = DVector::zeros(r);
    let mut a22 = 0.0;
    let mut a23 = DVector::zeros(p);
    let mut dh_da = DVector::zeros(r);
    let mut h_over = DVector::zeros(r);
    let mut a33 = DMatrix::zeros(p, p);
    let mut dh_db = DMatrix::zeros(p, r);
    let mut dxh = DMatrix::zeros(p, r);
    let mut tilt_h = DVector::zeros(r);
    let mut a55 = DMatrix::zeros(r, r);

    let mut xi = DVector::zeros(p);
    let mut hv = DVector::zeros(r);
    let mut hx = vec![0.0; q];
    let mut row = vec![0.0; p];
    for i in sample.control_indices() {
        for j in 0..p {
            row[j] = x[(i, j)];
            xi[j] = row[j];
        }
        spec.apply_into(&row, &mut hx);
        let delta = row_tilt(sample, i, theta);
        let big = 1.0 + rho * delta;
        let mix = delta * w + (1.0 - w);
        hv[0] = delta - 1.0;
        for k in 0..q {
            hv[1 + k] = mix * hx[k] - theta.mu[k];
        }
        for k in 0..q {
            a15[1 + k] += (1.0 - delta) * w1 * hx[k];
        }
        a22 += delta / big;
        a23.axpy(delta / big, &xi, 1.0);
        dh_da[0] += delta;
        for k in 0..q {
            dh_da[1 + k] += delta * w * hx[k];
        }
        h_over.axpy(1.0 / big, &hv, 1.0);
        a33.ger(delta / big, &xi, &xi, 1.0);
        for j in 0..p {
            dh_db[(j, 0)] += delta * xi[j];
            for k in 0..q {
                dh_db[(j, 1 + k)] += delta * w * hx[k] * xi[j];
            }
        }
        dxh.ger(delta / big, &xi, &hv, 1.0);
        tilt_h.axpy(delta / big, &hv, 1.0);
        a55.ger(1.0 / big, &hv, &hv, 1.0);
    }
    let frac = rho / (1.0 + rho);
    a15 /= n0;
    let a22 = frac * a22 / n0;
    let a23 = a23 * (frac / n0);
    let a25 = (dh_da + h_over) / n0;
    let a33 = symmetrize(&(a33 * (frac / n0)));
    let a35 = (dh_db - dxh * rho) / n0;
    let a55 = symmetrize(&(a55 * ((1.0 + rho) / n0)));
    let mut a45 = DMatrix::zeros(q, r);
    for k in 0..q {
        a45[(k, 1 + k)] = -1.0;
    }

    let (a44, d, vhat) = match weighting {
        FitWeighting::Penalized { w: wm, n_external, mu_tilde } => {
            let scale = *n_external as f64 / sample.n() as f64;
            let winv = spd_inverse(wm, "weight matrix")?;
            let vhat = vhat_at(theta, weights, sample, spec, mu_tilde)?;
            let a44 = &winv * scale;
            let d = (&winv * &vhat * &winv - &winv) * scale;
            (Some(a44), Some(symmetrize(&d)), Some(vhat))
        }
        FitWeighting::KnownMu { .. } => (None, None, None),
    };

    // column offsets
    let with_mu = a44.is_some();
    let mq = if with_mu { q } else { 0 };
    let rows = 2 + p + mq;
    let cols = 1 + p + mq + r;
    let nu0 = 1 + p + mq;
    let mut u = DMatrix::zeros(rows, cols);
    for k in 0..r {
        u[(0, nu0 + k)] = a15[k];
        u[(1, nu0 + k)] = a25[k];
    }
    u[(1, 0)] = a22;
    for j in 0..p {
        u[(1, 1 + j)] = a23[j];
        u[(2 + j, 0)] = a23[j];
        for l in 0..p {
            u[(2 + j, 1 + l)] = a33[(j, l)];
        }
        for k in 0..r {
            u[(2 + j, nu0 + k)] = a35[(j, k)];
        }
    }
    let mut m = DMatrix::zeros(cols, cols);
    m[(0, 0)] = a22;
    for j in 0..p {
        m[(0, 1 + j)] = a23[j];
        m[(1 + j, 0)] = a23[j];
        for l in 0..p {
            m[(1 + j, 1 + l)] = a33[(j, l)];
        }
    }
    if let Some(a44) = &a44 {
        for k in 0..q {
            for l in 0..q {
                u[(2 + p + k, 1 + p + l)] = a44[(k, l)];
                m[(1 + p + k, 1 + p + l)] = a44[(k, l)];
            }
            for l in 0..r {
                u[(2 + p + k, nu0 + l)] = a45[(k, l)];
            }
        }
    }
    for k in 0..r {
        for l in 0..r {
            m[(nu0 + k, nu0 + l)] = a55[(k, l)];
        }
    }

    // M is block diagonal; invert block by block so a failure names its block
    let mut m_inv = DMatrix::zeros(cols, cols);
    let slope_block = m.view((0, 0), (1 + p, 1 + p)).into_owned();
    m_inv
        .view_mut((0, 0), (1 + p, 1 + p))
        .copy_from(&spd_inverse(&slope_block, "A22/A23/A33").map_err(name_block("A22/A23/A33"))?);
    if let Some(a44) = &a44 {
        m_inv
            .view_mut((1 + p, 1 + p), (q, q))
            .copy_from(&spd_inverse(a44, "A44").map_err(name_block("A44"))?);
    }
    m_inv
        .view_mut((nu0, nu0), (r, r))
        .copy_from(&spd_inverse(&a55, "A55").map_err(name_block("A55"))?);

    let j_raw = &u * &m_inv * u.transpose();
    let j_asymmetry = asymmetry(&j_raw);
    let j = symmetrize(&j_raw);

    let mut c = DVector::zeros(cols);
    c[0] = a22;
    for jx in 0..p {
        c[1 + jx] = a23[jx];
    }
    // case-sample mean of the nu score, scaled by n1 / n
    for k in 0..r {
        c[nu0 + k] = -rho * tilt_h[k] / n0;
    }

    let d_full = d.map(|dq| {
        let mut full = DMatrix::zeros(cols, cols);
        full.view_mut((1 + p, 1 + p), (q, q)).copy_from(&dq);
        full
    });

    Ok(AsymptoticBlocks {
        p,
        q,
        rho,
        n: sample.n(),
        a15,
        a22,
        a23,
        a25,
        a33,
        a35,
        a44,
        a45,
        a55,
        u,
        m,
        j,
        c,
        d: d_full,
        vhat,
        j_asymmetry,
        m_inv,
    })
}

fn name_block(block: &'static str) -> impl Fn(Error) -> Error {
    move |e| match e {
        Error::IllConditioned { condition, .. } => Error::IllConditioned { what: block, condition },
        _ => Error::SingularBlock { block },
    }
}

/// Covariance of `sqrt(n) (theta_hat - theta)` and the implied standard errors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CovarianceEstimate {
    pub form: CovForm,
    pub sigma: DMatrix<f64>,
    /// Internal sample size used to scale standard errors.
    pub n: usize,
    /// Standard errors of `(gamma, alpha_star, beta[, mu])`.
    pub se_theta: DVector<f64>,
    /// Standard error of `alpha = alpha_star - gamma`.
    pub se_alpha: f64,
    /// Standard error of the case proportion.
    pub se_pi: f64,
}

impl CovarianceEstimate {
    fn from_sigma(form: CovForm, sigma: DMatrix<f64>, n: usize, gamma: f64) -> Result<Self> {
        let sigma = symmetrize(&sigma);
        for (index, &value) in sigma.diagonal().iter().enumerate() {
            if value < -NEG_TOL || !value.is_finite() {
                return Err(Error::NegativeVariance { index, value });
            }
        }
        let nf = n as f64;
        let se_theta = sigma.diagonal().map(|v| (v.max(0.0) / nf).sqrt());
        let var_alpha = sigma[(1, 1)] + sigma[(0, 0)] - 2.0 * sigma[(0, 1)];
        if var_alpha < -NEG_TOL {
            return Err(Error::NegativeVariance { index: 1, value: var_alpha });
        }
        let se_alpha = (var_alpha.max(0.0) / nf).sqrt();
        let pi = case_proportion(gamma);
        let se_pi = pi * (1.0 - pi) * se_theta[0];
        Ok(Self { form, sigma, n, se_theta, se_alpha, se_pi })
    }

    /// Standard errors of `(alpha, beta)`.
    pub fn se_regression(&self, p: usize) -> DVector<f64> {
        let mut out = DVector::zeros(1 + p);
        out[0] = self.se_alpha;
        out.rows_mut(1, p).copy_from(&self.se_theta.rows(2, p));
        out
    }
}

/// Evaluates one covariance formula at the fitted `gamma`.
pub fn sigma_hat(blocks: &AsymptoticBlocks, form: CovForm, gamma: f64) -> Result<CovarianceEstimate> {
    let rho = blocks.rho;
    let k = (1.0 + rho).powi(2) / rho;
    match (form, blocks.is_internal()) {
        (CovForm::InternalI, false) => {
            return Err(Error::invalid("internal form needs blocks from a known-mu fit"))
        }
        (CovForm::GeneralW | CovForm::OptimalV, true) => {
            return Err(Error::invalid("weighted forms need blocks from a penalized fit"))
        }
        _ => {}
    }
    let j_inv = spd_inverse(&blocks.j, "J")?;
    let sigma = match form {
        CovForm::GeneralW => {
            let left = &j_inv * &blocks.u * &blocks.m_inv;
            let d = blocks.d.as_ref().expect("penalized blocks carry D");
            let middle = &blocks.m + d - &blocks.c * blocks.c.transpose() * k;
            &left * middle * left.transpose()
        }
        CovForm::OptimalV | CovForm::InternalI => {
            let g = &j_inv * &blocks.u * &blocks.m_inv * &blocks.c;
            &j_inv - &g * g.transpose() * k
        }
    };
    CovarianceEstimate::from_sigma(form, sigma, blocks.n, gamma)
}

/// `estimate -/+ z se` with `z` the `(1 + level) / 2` standard normal quantile.
pub fn wald_ci(estimate: f64, se: f64, level: f64) -> (f64, f64) {
    let normal = Normal::standard();
    let z = normal.inverse_cdf(0.5 * (1.0 + level));
    (estimate - z * se, estimate + z * se)
}

/// Outcome of the iterated optimal-weight fit.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimalFit {
    pub fit: FitResult,
    pub covariance: CovarianceEstimate,
    /// Weighting matrix used in the final refit.
    pub vhat: DMatrix<f64>,
    pub refits: usize,
    /// `max |theta_t - theta_(t-1)|` after each refit.
    pub trace: Vec<f64>,
}

/// Fits with `W = I`, then refits with `W` set to the current covariance
/// estimate of `h(X)` until the estimate stops moving.
pub fn algorithm1(
    sample: &Sample,
    external: &External,
    spec: &ConstraintSpec<f64>,
    cfg: &SolverConfig,
) -> Result<OptimalFit> {
    let q = external.q();
    let start = external.with_weight(WeightSpec::Given(DMatrix::identity(q, q)))?;
    let mut fit = fit_mele(sample, &start, spec, cfg)?;
    let mut trace = Vec::new();
    for round in 1..=MAX_REFITS {
        let vhat = estimate_vhat(&fit, sample, spec, &external.mu_tilde)?;
        let ext = external.with_weight(WeightSpec::Given(vhat.clone()))?;
        let next = fit_mele_from(sample, &ext, spec, cfg, Some(&fit.theta))?;
        let step = (next.theta.to_vector() - fit.theta.to_vector()).amax();
        trace.push(step);
        fit = next;
        if step <= REFIT_TOL {
            let blocks = assemble_blocks(&fit, sample, spec)?;
            let covariance = sigma_hat(&blocks, CovForm::OptimalV, fit.theta.gamma)?;
            return Ok(OptimalFit { fit, covariance, vhat, refits: round, trace });
        }
    }
    Err(Error::RefitNonConvergence { iterations: MAX_REFITS, trace })
}

/// A fit with its covariance, for whichever weighting the summary requests.
#[derive(Debug, Clone, PartialEq)]
pub struct ExternalFit {
    pub fit: FitResult,
    pub covariance: CovarianceEstimate,
    pub vhat: Option<DMatrix<f64>>,
    pub refit_trace: Vec<f64>,
}

/// Dispatches on the weighting choice: a given matrix uses the sandwich form,
/// the optimal choice runs [`algorithm1`], and a population-level summary
/// fits with `mu` known.
pub fn fit_external(
    sample: &Sample,
    external: &External,
    spec: &ConstraintSpec<f64>,
    cfg: &SolverConfig,
) -> Result<ExternalFit> {
    match &external.weight {
        WeightSpec::Given(_) => {
            let fit = fit_mele(sample, external, spec, cfg)?;
            let blocks = assemble_blocks(&fit, sample, spec)?;
            let covariance = sigma_hat(&blocks, CovForm::GeneralW, fit.theta.gamma)?;
            Ok(ExternalFit { fit, covariance, vhat: blocks.vhat, refit_trace: Vec::new() })
        }
        WeightSpec::Optimal => {
            let opt = algorithm1(sample, external, spec, cfg)?;
            Ok(ExternalFit {
                fit: opt.fit,
                covariance: opt.covariance,
                vhat: Some(opt.vhat),
                refit_trace: opt.trace,
            })
        }
        WeightSpec::Population => {
            let fit = fit_known_mu(sample, &external.mu_tilde, spec, cfg)?;
            let blocks = assemble_blocks(&fit, sample, spec)?;
            let covariance = sigma_hat(&blocks, CovForm::InternalI, fit.theta.gamma)?;
            Ok(ExternalFit { fit, covariance, vhat: None, refit_trace: Vec::new() })
        }
    }
}
