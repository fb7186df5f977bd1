//! Profiled objective `l(theta) = l(theta, nu(theta))` with its analytic
//! gradient and Hessian.
//!
//! With `f_i = nu'H_i(theta)`, `z_i = 1 + f_i` and
//! `G(theta, nu) = -sum_i log z_i`:
//!
//! ```text
//! dl/dtheta   = sum_i y_i (0, 1, x_i, 0) + G_theta - dP/dtheta
//! d2l/dtheta2 = G_theta_theta - G_theta_nu G_nu_nu^+ G_nu_theta - d2P/dtheta2
//! ```
//!
//! where `P` is the quadratic penalty on `mu`. The first line holds because
//! `G_nu = 0` at `nu(theta)`; the second differentiates that identity.

use nalgebra::{DMatrix, DVector};

use super::dual::{solve_dual, LagrangeState};
use super::SolverConfig;
use crate::error::{Error, Result};
use crate::linalg::{psd_pinv, spd_inverse};
use crate::model::{case_proportion, tilt_from_log, ConstraintSpec};
use crate::Sample;

#[derive(Debug, Clone)]
pub(crate) enum Objective {
    Penalized {
        mu_tilde: DVector<f64>,
        winv: DMatrix<f64>,
        n_external: f64,
    },
    KnownMu {
        mu_tilde: DVector<f64>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub(crate) enum Order {
    Value,
    Gradient,
    Hessian,
}

#[derive(Debug, Clone)]
pub(crate) struct Evaluation {
    pub value: f64,
    pub state: LagrangeState,
    pub grad: Option<DVector<f64>>,
    pub hess: Option<DMatrix<f64>>,
    pub saturated: bool,
}

#[derive(Debug, Clone)]
pub(crate) struct Problem {
    pub n: usize,
    pub p: usize,
    pub q: usize,
    pub n1: usize,
    x: Vec<f64>,
    h: Vec<f64>,
    y: Vec<u8>,
    pub objective: Objective,
    score_const: DVector<f64>,
}

impl Problem {
    pub fn new(sample: &Sample, spec: &ConstraintSpec<f64>, objective: Objective) -> Result<Self> {
        let (n, p) = (sample.n(), sample.p());
        if spec.p() != p {
            return Err(Error::invalid(format!(
                "constraint expects {} covariates, sample has {p}",
                spec.p()
            )));
        }
        let q = spec.q();
        let mu_len = match &objective {
            Objective::Penalized { mu_tilde, winv, .. } => {
                if winv.nrows() != q || winv.ncols() != q {
                    return Err(Error::invalid("weight matrix does not match constraint dimension"));
                }
                mu_tilde.len()
            }
            Objective::KnownMu { mu_tilde } => mu_tilde.len(),
        };
        if mu_len != q {
            return Err(Error::invalid(format!(
                "mu_tilde has length {mu_len}, constraint has {q} outputs"
            )));
        }
        let cov = sample.covariates();
        let mut x = Vec::with_capacity(n * p);
        for i in 0..n {
            for j in 0..p {
                x.push(cov[(i, j)]);
            }
        }
        let hm = spec.h_matrix(cov);
        let mut h = Vec::with_capacity(n * q);
        for i in 0..n {
            for k in 0..q {
                h.push(hm[(i, k)]);
            }
        }
        let d = 2 + p + q;
        let mut score_const = DVector::zeros(d);
        for i in 0..n {
            if sample.outcomes()[i] == 1 {
                score_const[1] += 1.0;
                for j in 0..p {
                    score_const[2 + j] += x[i * p + j];
                }
            }
        }
        Ok(Self {
            n,
            p,
            q,
            n1: sample.n1(),
            x,
            h,
            y: sample.outcomes().to_vec(),
            objective,
            score_const,
        })
    }

    pub fn d(&self) -> usize {
        2 + self.p + self.q
    }

    pub fn r(&self) -> usize {
        1 + self.q
    }

    /// Number of optimized coordinates; `mu` is pinned when it is known.
    pub fn free_dim(&self) -> usize {
        match self.objective {
            Objective::Penalized { .. } => self.d(),
            Objective::KnownMu { .. } => 2 + self.p,
        }
    }

    /// `(n1/n, 0, ..., 0)`, the multiplier at the true parameter.
    pub fn default_nu(&self) -> DVector<f64> {
        let mut nu = DVector::zeros(self.r());
        nu[0] = self.n1 as f64 / self.n as f64;
        nu
    }

    fn row(&self, i: usize) -> &[f64] {
        &self.x[i * self.p..(i + 1) * self.p]
    }

    fn hrow(&self, i: usize) -> &[f64] {
        &self.h[i * self.q..(i + 1) * self.q]
    }

    fn log_tilt(&self, theta: &[f64], i: usize) -> f64 {
        let beta = &theta[2..2 + self.p];
        self.row(i).iter().zip(beta).fold(theta[1], |acc, (x, b)| acc + x * b)
    }

    /// Rows `H(x_i; theta)` and the tilts `delta_i`.
    pub fn constraint_matrix(&self, theta: &[f64]) -> (DMatrix<f64>, Vec<f64>, bool) {
        let (n, q) = (self.n, self.q);
        let mu = &theta[2 + self.p..];
        let w = case_proportion(theta[0]);
        let mut hmat = DMatrix::zeros(n, 1 + q);
        let mut deltas = Vec::with_capacity(n);
        let mut saturated = false;
        for i in 0..n {
            let t = tilt_from_log(self.log_tilt(theta, i));
            saturated |= t.saturated;
            let delta = t.value;
            let mix = delta * w + (1.0 - w);
            hmat[(i, 0)] = delta - 1.0;
            for (k, &hk) in self.hrow(i).iter().enumerate() {
                hmat[(i, 1 + k)] = mix * hk - mu[k];
            }
            deltas.push(delta);
        }
        (hmat, deltas, saturated)
    }

    fn penalty(&self, theta: &[f64]) -> f64 {
        match &self.objective {
            Objective::Penalized { mu_tilde, winv, n_external } => {
                let mu = DVector::from_column_slice(&theta[2 + self.p..]);
                let resid = mu_tilde - mu;
                0.5 * n_external * (resid.transpose() * winv * &resid)[(0, 0)]
            }
            Objective::KnownMu { .. } => 0.0,
        }
    }

    pub fn evaluate(
        &self,
        theta: &[f64],
        nu_start: &DVector<f64>,
        order: Order,
        cfg: &SolverConfig,
    ) -> Result<Evaluation> {
        if theta.len() != self.d() || theta.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("parameter vector has wrong length or non-finite entries"));
        }
        let (hmat, deltas, saturated) = self.constraint_matrix(theta);
        let state = solve_dual(&hmat, nu_start, cfg)?;
        let n = self.n as f64;

        let mut value = -self.penalty(theta);
        for i in 0..self.n {
            let z = 1.0 / (n * state.weights[i]);
            if self.y[i] == 1 {
                value += self.log_tilt(theta, i);
            }
            value -= z.ln();
        }

        if order == Order::Value {
            return Ok(Evaluation { value, state, grad: None, hess: None, saturated });
        }
        let (grad, hess) = self.derivatives(theta, &hmat, &deltas, &state, order == Order::Hessian);
        Ok(Evaluation { value, state, grad: Some(grad), hess, saturated })
    }

    fn derivatives(
        &self,
        theta: &[f64],
        hmat: &DMatrix<f64>,
        deltas: &[f64],
        state: &LagrangeState,
        with_hessian: bool,
    ) -> (DVector<f64>, Option<DMatrix<f64>>) {
        let (p, q, d, r) = (self.p, self.q, self.d(), self.r());
        let nf = self.n as f64;
        let nu = &state.nu;
        let w = case_proportion(theta[0]);
        let w1 = w * (1.0 - w);

        let mut grad = self.score_const.clone();
        let mut g_tt = DMatrix::<f64>::zeros(d, d);
        let mut g_tn = DMatrix::<f64>::zeros(d, r);
        let mut g_nn = DMatrix::<f64>::zeros(r, r);

        let mut gf = vec![0.0; d];
        let mut jac = DMatrix::<f64>::zeros(r, d);
        for i in 0..self.n {
            let z = 1.0 / (nf * state.weights[i]);
            let delta = deltas[i];
            let x = self.row(i);
            let hx = self.hrow(i);
            let c: f64 = (0..q).map(|k| nu[1 + k] * hx[k]).sum();
            let mix_g = (1.0 - delta) * w1;
            // derivative of nu'H_i with respect to alpha_star
            let a = nu[0] * delta + c * delta * w;

            gf[0] = c * mix_g;
            gf[1] = a;
            for j in 0..p {
                gf[2 + j] = a * x[j];
            }
            for k in 0..q {
                gf[2 + p + k] = -nu[1 + k];
            }
            for (g, &v) in grad.iter_mut().zip(&gf) {
                *g -= v / z;
            }
            if !with_hessian {
                continue;
            }

            let inv_z = 1.0 / z;
            let inv_z2 = inv_z * inv_z;
            // second derivatives of nu'H_i, only the (gamma, alpha_star, beta) block is non-zero
            let zz = |j: usize| if j == 0 { 1.0 } else { x[j - 1] };
            for s in 0..=p {
                for t in 0..=s {
                    g_tt[(1 + s, 1 + t)] -= a * zz(s) * zz(t) * inv_z;
                }
                g_tt[(1 + s, 0)] -= c * (-delta * w1) * zz(s) * inv_z;
            }
            g_tt[(0, 0)] -= c * (1.0 - delta) * (-w1 * (1.0 - 2.0 * w)) * inv_z;
            for s in 0..d {
                for t in 0..=s {
                    g_tt[(s, t)] += gf[s] * gf[t] * inv_z2;
                }
            }

            jac.fill(0.0);
            jac[(0, 1)] = delta;
            for j in 0..p {
                jac[(0, 2 + j)] = delta * x[j];
            }
            for k in 0..q {
                jac[(1 + k, 0)] = mix_g * hx[k];
                jac[(1 + k, 1)] = delta * w * hx[k];
                for j in 0..p {
                    jac[(1 + k, 2 + j)] = delta * w * hx[k] * x[j];
                }
                jac[(1 + k, 2 + p + k)] = -1.0;
            }
            for s in 0..d {
                for b in 0..r {
                    g_tn[(s, b)] += -jac[(b, s)] * inv_z + gf[s] * hmat[(i, b)] * inv_z2;
                }
            }
            for a_ in 0..r {
                for b in 0..=a_ {
                    g_nn[(a_, b)] += hmat[(i, a_)] * hmat[(i, b)] * inv_z2;
                }
            }
        }

        if let Objective::Penalized { mu_tilde, winv, n_external } = &self.objective {
            let mu = DVector::from_column_slice(&theta[2 + p..]);
            let pg = winv * (mu_tilde - mu) * *n_external;
            for k in 0..q {
                grad[2 + p + k] += pg[k];
            }
        }
        if !with_hessian {
            return (grad, None);
        }

        for s in 0..d {
            for t in 0..s {
                g_tt[(t, s)] = g_tt[(s, t)];
            }
        }
        for a_ in 0..r {
            for b in 0..a_ {
                g_nn[(b, a_)] = g_nn[(a_, b)];
            }
        }
        let g_nn_inv = spd_inverse(&g_nn, "dual Hessian").unwrap_or_else(|_| psd_pinv(&g_nn, 1e-13));
        let mut hess = g_tt - &g_tn * g_nn_inv * g_tn.transpose();
        if let Objective::Penalized { winv, n_external, .. } = &self.objective {
            let mut block = hess.view_mut((2 + p, 2 + p), (q, q));
            block -= winv * *n_external;
        }
        (grad, Some(crate::linalg::symmetrize(&hess)))
    }
}
