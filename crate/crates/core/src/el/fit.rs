use nalgebra::{DMatrix, DVector};

use super::dual::LagrangeState;
use super::profile::{Evaluation, Objective, Order, Problem};
use super::SolverConfig;
use crate::baselines::fit_prospective_mle;
use crate::error::{Error, Result};
use crate::linalg::{spd_inverse, symmetrize};
use crate::model::{case_proportion, ConstraintSpec, ThetaFull, WeightSpec};
use crate::{External, Sample, Theta};

/// Largest sup-norm step taken by one outer Newton iteration.
const MAX_STEP: f64 = 2.0;

/// Relative objective change treated as rounding noise.
const ROUNDING_GAIN: f64 = 1e-11;

/// Slopes with sup norm below this are treated as zero.
const BETA_IDENTIFIABLE: f64 = 1e-4;

/// How the external information entered a fit.
#[derive(Debug, Clone, PartialEq)]
pub enum FitWeighting {
    Penalized {
        w: DMatrix<f64>,
        n_external: usize,
        mu_tilde: DVector<f64>,
    },
    KnownMu {
        mu_tilde: DVector<f64>,
    },
}

impl FitWeighting {
    pub fn mu_tilde(&self) -> &DVector<f64> {
        match self {
            FitWeighting::Penalized { mu_tilde, .. } | FitWeighting::KnownMu { mu_tilde } => mu_tilde,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Diagnostics {
    /// Some tilt was clamped at the final iterate.
    pub tilt_saturated: bool,
    /// `|gamma|` sits at the configured bound.
    pub gamma_at_bound: bool,
    /// The initial `gamma` solve had to be clamped.
    pub init_gamma_clamped: bool,
    /// Relative gap between analytic and central difference gradients, when
    /// requested through [`SolverConfig::check_gradient`].
    pub gradient_check: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitResult {
    pub theta: Theta,
    pub nu: DVector<f64>,
    pub weights: Vec<f64>,
    /// Profiled objective at `theta`.
    pub objective: f64,
    pub converged: bool,
    pub outer_iterations: usize,
    pub inner_iterations: usize,
    /// `max |dl/dtheta| / n` over the optimized coordinates.
    pub grad_norm: f64,
    pub diagnostics: Diagnostics,
    pub weighting: FitWeighting,
    /// Objective after each accepted outer step, starting with the initial point.
    pub objective_trace: Vec<f64>,
}

impl FitResult {
    pub fn alpha(&self) -> f64 {
        self.theta.alpha()
    }

    pub fn case_proportion(&self) -> f64 {
        self.theta.case_proportion()
    }

    pub fn lagrange_state(&self) -> LagrangeState {
        LagrangeState {
            nu: self.nu.clone(),
            weights: self.weights.clone(),
            lambda: 1.0,
            iterations: 0,
            residual: 0.0,
        }
    }
}

/// Starting values for the outer optimization.
#[derive(Debug, Clone, PartialEq)]
pub struct InitEstimates {
    /// Case-sample mean of `h`.
    pub mu1_hat: DVector<f64>,
    /// Control-sample mean of `h`.
    pub mu0_hat: DVector<f64>,
    pub gamma_init: f64,
    pub alpha_star_init: f64,
    pub beta_init: DVector<f64>,
    pub gamma_clamped: bool,
}

/// Solves `mu_tilde = pi mu1 + (1 - pi) mu0` for `pi` by least squares and
/// returns `gamma = log((1 - pi) / pi)`, clamped to `[-bound, bound]`.
pub fn gamma_from_means(
    mu1: &DVector<f64>,
    mu0: &DVector<f64>,
    mu_tilde: &DVector<f64>,
    bound: f64,
) -> Result<(f64, bool)> {
    let diff = mu1 - mu0;
    let scale = 1.0 + mu1.amax().max(mu0.amax());
    if diff.amax() <= 1e-8 * scale {
        return Err(Error::Identifiability(
            "case and control means of h coincide, so the marginal case proportion is not identified".into(),
        ));
    }
    let pi = diff.dot(&(mu_tilde - mu0)) / diff.norm_squared();
    let lo = case_proportion(bound);
    let hi = case_proportion(-bound);
    if pi <= lo {
        Ok((bound, true))
    } else if pi >= hi {
        Ok((-bound, true))
    } else {
        Ok((((1.0 - pi) / pi).ln(), false))
    }
}

pub fn init_theta(
    sample: &Sample,
    mu_tilde: &DVector<f64>,
    spec: &ConstraintSpec<f64>,
    cfg: &SolverConfig,
) -> Result<InitEstimates> {
    if mu_tilde.len() != spec.q() {
        return Err(Error::invalid("mu_tilde length does not match the constraint"));
    }
    let hm = spec.h_matrix(sample.covariates());
    let q = spec.q();
    let mut mu1 = DVector::zeros(q);
    let mut mu0 = DVector::zeros(q);
    for (i, &y) in sample.outcomes().iter().enumerate() {
        let target = if y == 1 { &mut mu1 } else { &mut mu0 };
        for k in 0..q {
            target[k] += hm[(i, k)];
        }
    }
    mu1 /= sample.n1() as f64;
    mu0 /= sample.n0() as f64;
    let (gamma, clamped) = gamma_from_means(&mu1, &mu0, mu_tilde, cfg.gamma_bound)?;
    let mle = fit_prospective_mle(sample, cfg)?;
    Ok(InitEstimates {
        mu1_hat: mu1,
        mu0_hat: mu0,
        gamma_init: gamma,
        // prospective intercept on case-control data estimates alpha_star + log(rho)
        alpha_star_init: mle.alpha - sample.rho().ln(),
        beta_init: mle.beta,
        gamma_clamped: clamped,
    })
}

fn objective_for(external: &External) -> Result<Objective> {
    match &external.weight {
        WeightSpec::Given(w) => Ok(Objective::Penalized {
            mu_tilde: external.mu_tilde.clone(),
            winv: spd_inverse(w, "weight matrix")?,
            n_external: external.n_external as f64,
        }),
        WeightSpec::Population => Ok(Objective::KnownMu { mu_tilde: external.mu_tilde.clone() }),
        WeightSpec::Optimal => Err(Error::invalid(
            "optimal weighting has no fixed matrix; use the iterated refit",
        )),
    }
}

fn pinned(theta: &Theta, objective: &Objective) -> DVector<f64> {
    let mut v = theta.to_vector();
    if let Objective::KnownMu { mu_tilde } = objective {
        let p = theta.p();
        v.rows_mut(2 + p, mu_tilde.len()).copy_from(mu_tilde);
    }
    v
}

/// Inner solve at `theta`: multipliers and EL weights.
pub fn solve_nu(theta: &Theta, sample: &Sample, spec: &ConstraintSpec<f64>, cfg: &SolverConfig) -> Result<LagrangeState> {
    let prob = Problem::new(sample, spec, Objective::KnownMu { mu_tilde: theta.mu.clone() })?;
    let v = theta.to_vector();
    prob.evaluate(v.as_slice(), &prob.default_nu(), Order::Value, cfg).map(|ev| ev.state)
}

fn evaluate_at(
    theta: &Theta,
    sample: &Sample,
    external: &External,
    spec: &ConstraintSpec<f64>,
    cfg: &SolverConfig,
    order: Order,
) -> Result<Evaluation> {
    let obj = objective_for(external)?;
    let v = pinned(theta, &obj);
    let prob = Problem::new(sample, spec, obj)?;
    prob.evaluate(v.as_slice(), &prob.default_nu(), order, cfg)
}

/// `l(theta, nu(theta))` and `nu(theta)`. With population-level weighting the
/// penalty is dropped and `mu` is pinned to `mu_tilde`.
pub fn profile_objective(
    theta: &Theta,
    sample: &Sample,
    external: &External,
    spec: &ConstraintSpec<f64>,
    cfg: &SolverConfig,
) -> Result<(f64, DVector<f64>)> {
    let ev = evaluate_at(theta, sample, external, spec, cfg, Order::Value)?;
    Ok((ev.value, ev.state.nu))
}

/// Envelope gradient of the profiled objective over all `2 + p + q` coordinates.
pub fn profile_gradient(
    theta: &Theta,
    sample: &Sample,
    external: &External,
    spec: &ConstraintSpec<f64>,
    cfg: &SolverConfig,
) -> Result<DVector<f64>> {
    let ev = evaluate_at(theta, sample, external, spec, cfg, Order::Gradient)?;
    Ok(ev.grad.expect("gradient requested"))
}

pub fn profile_hessian(
    theta: &Theta,
    sample: &Sample,
    external: &External,
    spec: &ConstraintSpec<f64>,
    cfg: &SolverConfig,
) -> Result<DMatrix<f64>> {
    let ev = evaluate_at(theta, sample, external, spec, cfg, Order::Hessian)?;
    Ok(ev.hess.expect("hessian requested"))
}

/// Maximum empirical likelihood fit with a fixed weighting matrix (or with
/// `mu` known, for population-level summaries).
pub fn fit_mele(
    sample: &Sample,
    external: &External,
    spec: &ConstraintSpec<f64>,
    cfg: &SolverConfig,
) -> Result<FitResult> {
    fit_mele_from(sample, external, spec, cfg, None)
}

/// [`fit_mele`] started from `start` instead of the default initialization.
pub fn fit_mele_from(
    sample: &Sample,
    external: &External,
    spec: &ConstraintSpec<f64>,
    cfg: &SolverConfig,
    start: Option<&Theta>,
) -> Result<FitResult> {
    cfg.validate()?;
    if external.q() != spec.q() {
        return Err(Error::invalid(format!(
            "external summary has {} components, constraint has {}",
            external.q(),
            spec.q()
        )));
    }
    let objective = objective_for(external)?;
    let weighting = match &external.weight {
        WeightSpec::Given(w) => FitWeighting::Penalized {
            w: w.clone(),
            n_external: external.n_external,
            mu_tilde: external.mu_tilde.clone(),
        },
        _ => FitWeighting::KnownMu { mu_tilde: external.mu_tilde.clone() },
    };
    let problem = Problem::new(sample, spec, objective)?;
    let (theta0, clamped) = match start {
        Some(t) => (t.clone(), false),
        None => {
            let init = init_theta(sample, &external.mu_tilde, spec, cfg)?;
            let t = ThetaFull::new(
                init.gamma_init,
                init.alpha_star_init,
                init.beta_init.clone(),
                external.mu_tilde.clone(),
            );
            (t, init.gamma_clamped)
        }
    };
    let mut fit = optimize(&problem, &theta0, cfg, weighting)?;
    fit.diagnostics.init_gamma_clamped = clamped;
    Ok(fit)
}

/// Fit with `mu` fixed at `mu_tilde`, optimizing `(gamma, alpha_star, beta)`.
pub fn fit_known_mu(
    sample: &Sample,
    mu_tilde: &DVector<f64>,
    spec: &ConstraintSpec<f64>,
    cfg: &SolverConfig,
) -> Result<FitResult> {
    let external = External::new(mu_tilde.clone(), 0, WeightSpec::Population)?;
    fit_mele(sample, &external, spec, cfg)
}

/// Outer modified Newton ascent over the free coordinates.
fn optimize(problem: &Problem, theta0: &Theta, cfg: &SolverConfig, weighting: FitWeighting) -> Result<FitResult> {
    let m = problem.free_dim();
    let nf = problem.n as f64;
    let mut theta = pinned(theta0, &problem.objective);
    theta[0] = theta[0].clamp(-cfg.gamma_bound, cfg.gamma_bound);

    let mut ev = feasible_start(problem, &mut theta, cfg)?;
    let mut inner_total = ev.state.iterations;
    let mut trace = vec![ev.value];
    let mut iterations = 0;
    let mut converged = false;
    let mut grad_norm;

    loop {
        let grad = ev.grad.as_ref().expect("hessian order").rows(0, m).into_owned();
        let hess = ev.hess.as_ref().expect("hessian order").view((0, 0), (m, m)).into_owned();
        // gamma pressed against its bound is held fixed
        let gamma_blocked = theta[0].abs() >= cfg.gamma_bound - 1e-12 && grad[0] * theta[0].signum() > 0.0;
        let mut g_eff = grad.clone();
        if gamma_blocked {
            g_eff[0] = 0.0;
        }
        grad_norm = g_eff.amax() / nf;
        if grad_norm <= cfg.outer_tol {
            converged = true;
            break;
        }
        if iterations >= cfg.max_outer_iters {
            break;
        }
        iterations += 1;

        let mut dir = ascent_direction(&hess, &g_eff, gamma_blocked);
        let big = dir.amax();
        if big > MAX_STEP {
            dir *= MAX_STEP / big;
        }
        match line_search(problem, &theta, &ev, &g_eff, &dir, m, cfg) {
            Some((cand, cand_ev)) => {
                inner_total += cand_ev.state.iterations;
                theta = cand;
                ev = problem.evaluate(theta.as_slice(), &cand_ev.state.nu, Order::Hessian, cfg)?;
                trace.push(ev.value);
            }
            None if predicted_gain(&g_eff, &dir) <= ROUNDING_GAIN * (1.0 + ev.value.abs()) => {
                // the gain is below what the objective can resolve; judge the
                // Newton step by the gradient instead
                let mut cand = theta.clone();
                for j in 0..m {
                    cand[j] += dir[j];
                }
                cand[0] = cand[0].clamp(-cfg.gamma_bound, cfg.gamma_bound);
                match problem.evaluate(cand.as_slice(), &ev.state.nu, Order::Hessian, cfg) {
                    Ok(cev) if free_grad_norm(&cev, &cand, m, cfg) < g_eff.amax() => {
                        inner_total += cev.state.iterations;
                        theta = cand;
                        ev = cev;
                        trace.push(ev.value);
                    }
                    _ => break,
                }
            }
            None => {
                // Newton direction exhausted; one steepest ascent attempt before giving up
                let steep = &g_eff / g_eff.amax().max(f64::MIN_POSITIVE) * MAX_STEP.min(1.0);
                match line_search(problem, &theta, &ev, &g_eff, &steep, m, cfg) {
                    Some((cand, cand_ev)) if cand_ev.value > ev.value => {
                        inner_total += cand_ev.state.iterations;
                        theta = cand;
                        ev = problem.evaluate(theta.as_slice(), &cand_ev.state.nu, Order::Hessian, cfg)?;
                        trace.push(ev.value);
                    }
                    _ => break,
                }
            }
        }
    }

    if !converged {
        return Err(Error::OuterNonConvergence {
            iterations,
            grad_norm,
            best: theta.iter().copied().collect(),
        });
    }

    let p = problem.p;
    let theta_hat = ThetaFull::from_slice(p, problem.q, theta.as_slice())?;
    if theta_hat.beta.amax() < BETA_IDENTIFIABLE {
        return Err(Error::Identifiability(format!(
            "fitted slopes vanish (max |beta| = {:e}), the intercept is not identified",
            theta_hat.beta.amax()
        )));
    }
    let mut diagnostics = Diagnostics {
        tilt_saturated: ev.saturated,
        gamma_at_bound: theta[0].abs() >= cfg.gamma_bound - 1e-9,
        ..Diagnostics::default()
    };
    if cfg.check_gradient {
        diagnostics.gradient_check = Some(gradient_discrepancy(problem, &theta, &ev, m, cfg)?);
    }
    Ok(FitResult {
        theta: theta_hat,
        nu: ev.state.nu.clone(),
        weights: ev.state.weights.clone(),
        objective: ev.value,
        converged,
        outer_iterations: iterations,
        inner_iterations: inner_total,
        grad_norm,
        diagnostics,
        weighting,
        objective_trace: trace,
    })
}

/// Evaluates at `theta`; when the inner problem is infeasible there, moves
/// `mu` to the implied mixture mean and then scans `gamma`.
fn feasible_start(problem: &Problem, theta: &mut DVector<f64>, cfg: &SolverConfig) -> Result<Evaluation> {
    let nu0 = problem.default_nu();
    let first = match problem.evaluate(theta.as_slice(), &nu0, Order::Hessian, cfg) {
        Ok(ev) => return Ok(ev),
        Err(e @ Error::ConstraintInfeasible { .. }) | Err(e @ Error::InnerNonConvergence { .. }) => e,
        Err(e) => return Err(e),
    };
    let (p, q) = (problem.p, problem.q);
    let free_mu = problem.free_dim() == problem.d();
    let mut best: Option<(f64, DVector<f64>)> = None;
    let steps = (2.0 * cfg.gamma_bound).ceil() as i32;
    for k in 0..=steps {
        let mut cand = theta.clone();
        cand[0] = -cfg.gamma_bound + k as f64 * (2.0 * cfg.gamma_bound / steps as f64);
        if free_mu {
            let mix = implied_mean(problem, &cand);
            cand.rows_mut(2 + p, q).copy_from(&mix);
        }
        if let Ok(ev) = problem.evaluate(cand.as_slice(), &nu0, Order::Value, cfg) {
            if best.as_ref().is_none_or(|(v, _)| ev.value > *v) {
                best = Some((ev.value, cand));
            }
        }
    }
    match best {
        Some((_, cand)) => {
            *theta = cand;
            problem.evaluate(theta.as_slice(), &nu0, Order::Hessian, cfg)
        }
        None => Err(first),
    }
}

/// `sum_i p_i mix_i h(x_i)` with `p_i` proportional to `1 / (n0 + n1 delta_i)`.
fn implied_mean(problem: &Problem, theta: &DVector<f64>) -> DVector<f64> {
    let (hm, deltas, _) = problem.constraint_matrix(theta.as_slice());
    let p = problem.p;
    let q = problem.q;
    let n1 = problem.n1 as f64;
    let n0 = (problem.n - problem.n1) as f64;
    let mu = theta.rows(2 + p, q);
    let w = case_proportion(theta[0]);
    let mut total = 0.0;
    let mut acc = DVector::zeros(q);
    for (i, &delta) in deltas.iter().enumerate() {
        let wt = 1.0 / (n0 + n1 * delta);
        let mix = delta * w + (1.0 - w);
        total += wt;
        for k in 0..q {
            // recover h(x_i) from the stored constraint row
            let hk = (hm[(i, 1 + k)] + mu[k]) / mix;
            acc[k] += wt * mix * hk;
        }
    }
    acc / total
}

fn predicted_gain(g: &DVector<f64>, dir: &DVector<f64>) -> f64 {
    g.dot(dir)
}

fn free_grad_norm(ev: &Evaluation, theta: &DVector<f64>, m: usize, cfg: &SolverConfig) -> f64 {
    let g = ev.grad.as_ref().expect("hessian order");
    let blocked = theta[0].abs() >= cfg.gamma_bound - 1e-12 && g[0] * theta[0].signum() > 0.0;
    (0..m).filter(|&j| !(j == 0 && blocked)).map(|j| g[j].abs()).fold(0.0, f64::max)
}

fn ascent_direction(hess: &DMatrix<f64>, grad: &DVector<f64>, gamma_blocked: bool) -> DVector<f64> {
    let m = grad.len();
    let mut b = -symmetrize(hess);
    if gamma_blocked {
        for j in 0..m {
            b[(0, j)] = 0.0;
            b[(j, 0)] = 0.0;
        }
        b[(0, 0)] = 1.0;
    }
    let eig = b.symmetric_eigen();
    let max = eig.eigenvalues.iter().fold(0.0f64, |a, &v| a.max(v.abs()));
    let floor = (max * 1e-10).max(f64::MIN_POSITIVE);
    let inv = eig.eigenvalues.map(|v| 1.0 / v.abs().max(floor));
    let mut dir = &eig.eigenvectors * DMatrix::from_diagonal(&inv) * eig.eigenvectors.transpose() * grad;
    if gamma_blocked {
        dir[0] = 0.0;
    }
    dir
}

fn line_search(
    problem: &Problem,
    theta: &DVector<f64>,
    ev: &Evaluation,
    grad: &DVector<f64>,
    dir: &DVector<f64>,
    m: usize,
    cfg: &SolverConfig,
) -> Option<(DVector<f64>, Evaluation)> {
    let mut t = 1.0;
    while t > 1e-12 {
        let mut cand = theta.clone();
        for j in 0..m {
            cand[j] += t * dir[j];
        }
        cand[0] = cand[0].clamp(-cfg.gamma_bound, cfg.gamma_bound);
        let moved: f64 = (0..m).map(|j| grad[j] * (cand[j] - theta[j])).sum();
        if moved <= 0.0 {
            return None;
        }
        if let Ok(cev) = problem.evaluate(cand.as_slice(), &ev.state.nu, Order::Value, cfg) {
            if cev.value >= ev.value + cfg.ls_sufficient_decrease * moved {
                return Some((cand, cev));
            }
        }
        t *= cfg.ls_shrink;
    }
    None
}

fn gradient_discrepancy(
    problem: &Problem,
    theta: &DVector<f64>,
    ev: &Evaluation,
    m: usize,
    cfg: &SolverConfig,
) -> Result<f64> {
    let grad = ev.grad.as_ref().expect("gradient");
    let mut worst = 0.0f64;
    for j in 0..m {
        let h = cfg.fd_step * (1.0 + theta[j].abs());
        let mut tp = theta.clone();
        let mut tm = theta.clone();
        tp[j] += h;
        tm[j] -= h;
        let fp = problem.evaluate(tp.as_slice(), &ev.state.nu, Order::Value, cfg)?.value;
        let fm = problem.evaluate(tm.as_slice(), &ev.state.nu, Order::Value, cfg)?.value;
        let fd = (fp - fm) / (2.0 * h);
        worst = worst.max((fd - grad[j]).abs() / (1.0 + grad[j].abs().max(fd.abs())));
    }
    Ok(worst)
}
