//! Structured run reports. Each run writes a pretty-printed JSON document and
//! a plain text table; both are pure functions of the report value so a
//! reloaded report renders to the same bytes.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::analyze::AnalyzeReport;
use super::dataset::Standardization;
use crate::baselines::MleResult;
use crate::el::SolverConfig;
use crate::error::{Error, Result};
use crate::inference::{wald_ci, CovForm, ExternalFit};
use crate::simulation::McReport;

/// Confidence level of reported intervals.
pub const CI_LEVEL: f64 = 0.95;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
#[allow(clippy::large_enum_variant)]
pub enum Report {
    Fit(FitReport),
    Simulate(McReport),
    Analyze(AnalyzeReport),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamRow {
    pub name: String,
    pub estimate: f64,
    #[serde(with = "crate::serde_nan")]
    pub se: f64,
    #[serde(with = "crate::serde_nan")]
    pub ci_lower: f64,
    #[serde(with = "crate::serde_nan")]
    pub ci_upper: f64,
}

impl ParamRow {
    pub fn new(name: impl Into<String>, estimate: f64, se: f64) -> Self {
        let (ci_lower, ci_upper) = if se.is_finite() { wald_ci(estimate, se, CI_LEVEL) } else { (f64::NAN, f64::NAN) };
        Self { name: name.into(), estimate, se, ci_lower, ci_upper }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolverSummary {
    pub converged: bool,
    pub objective: f64,
    pub grad_norm: f64,
    pub outer_iterations: usize,
    pub inner_iterations: usize,
    pub refits: usize,
    pub refit_trace: Vec<f64>,
    pub tilt_saturated: bool,
    pub gamma_at_bound: bool,
    pub init_gamma_clamped: bool,
    pub gradient_check: Option<f64>,
    pub config: SolverConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MleSummary {
    pub params: Vec<ParamRow>,
    pub case_proportion: f64,
    pub log_likelihood: f64,
}

impl MleSummary {
    pub fn new(mle: &MleResult, names: &[String]) -> Self {
        let mut params = vec![ParamRow::new("alpha", mle.alpha, mle.se[0])];
        for (j, name) in names.iter().enumerate() {
            params.push(ParamRow::new(name.clone(), mle.beta[j], mle.se[1 + j]));
        }
        Self { params, case_proportion: mle.naive_case_prop, log_likelihood: mle.log_likelihood }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub data: Option<String>,
    pub n: usize,
    pub n1: usize,
    pub n0: usize,
    pub covariates: Vec<String>,
    pub standardization: Option<Standardization>,
    pub constraint: String,
    pub mu_tilde: Vec<f64>,
    pub n_external: usize,
    pub weighting: String,
    pub covariance_form: CovForm,
    pub ci_level: f64,
    /// `alpha`, the slopes, `gamma`, the case proportion and the `mu` entries.
    pub params: Vec<ParamRow>,
    /// Asymptotic covariance of `sqrt(n) (theta_hat - theta)`.
    pub covariance: DMatrix<f64>,
    pub solver: SolverSummary,
    pub mle: Option<MleSummary>,
}

/// Metadata about the fitted problem that the fit result itself does not carry.
#[derive(Debug, Clone)]
pub struct FitContext<'a> {
    pub data: Option<String>,
    pub covariates: &'a [String],
    pub standardization: Option<Standardization>,
    pub constraint: String,
    pub n_external: usize,
    pub weighting: &'a str,
    pub solver: &'a SolverConfig,
}

impl FitReport {
    pub fn new(ctx: FitContext<'_>, sample: &crate::Sample, ef: &ExternalFit, mle: Option<&MleResult>) -> Self {
        let fit = &ef.fit;
        let cov = &ef.covariance;
        let p = sample.p();
        let mut params = vec![ParamRow::new("alpha", fit.alpha(), cov.se_alpha)];
        for (j, name) in ctx.covariates.iter().enumerate() {
            params.push(ParamRow::new(name.clone(), fit.theta.beta[j], cov.se_theta[2 + j]));
        }
        params.push(ParamRow::new("gamma", fit.theta.gamma, cov.se_theta[0]));
        params.push(ParamRow::new("case_proportion", fit.case_proportion(), cov.se_pi));
        for k in 0..fit.theta.q() {
            let se = cov.se_theta.get(2 + p + k).copied().unwrap_or(f64::NAN);
            params.push(ParamRow::new(format!("mu{}", k + 1), fit.theta.mu[k], se));
        }
        let d = &fit.diagnostics;
        Self {
            data: ctx.data,
            n: sample.n(),
            n1: sample.n1(),
            n0: sample.n0(),
            covariates: ctx.covariates.to_vec(),
            standardization: ctx.standardization,
            constraint: ctx.constraint,
            mu_tilde: fit.weighting.mu_tilde().iter().copied().collect(),
            n_external: ctx.n_external,
            weighting: ctx.weighting.to_string(),
            covariance_form: cov.form,
            ci_level: CI_LEVEL,
            params,
            covariance: cov.sigma.clone(),
            solver: SolverSummary {
                converged: fit.converged,
                objective: fit.objective,
                grad_norm: fit.grad_norm,
                outer_iterations: fit.outer_iterations,
                inner_iterations: fit.inner_iterations,
                refits: ef.refit_trace.len(),
                refit_trace: ef.refit_trace.clone(),
                tilt_saturated: d.tilt_saturated,
                gamma_at_bound: d.gamma_at_bound,
                init_gamma_clamped: d.init_gamma_clamped,
                gradient_check: d.gradient_check,
                config: ctx.solver.clone(),
            },
            mle: mle.map(|m| MleSummary::new(m, ctx.covariates)),
        }
    }
}

impl Report {
    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn render_text(&self) -> String {
        match self {
            Report::Fit(r) => render_fit(r),
            Report::Simulate(r) => render_mc(r),
            Report::Analyze(r) => super::analyze::render(r),
        }
    }
}

/// Writes `<base>.json` and `<base>.txt`, creating parent directories.
pub fn write_report(report: &Report, base: &Path) -> Result<(PathBuf, PathBuf)> {
    if let Some(dir) = base.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    let json = with_extension(base, "json");
    let txt = with_extension(base, "txt");
    std::fs::write(&json, report.to_json()?).map_err(|e| io_at(&json, e))?;
    std::fs::write(&txt, report.render_text()).map_err(|e| io_at(&txt, e))?;
    Ok((json, txt))
}

pub fn read_report(path: &Path) -> Result<Report> {
    let text = std::fs::read_to_string(path).map_err(|e| io_at(path, e))?;
    Report::from_json(&text)
}

fn with_extension(base: &Path, ext: &str) -> PathBuf {
    let mut s = base.as_os_str().to_owned();
    s.push(".");
    s.push(ext);
    PathBuf::from(s)
}

fn io_at(path: &Path, e: std::io::Error) -> Error {
    Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))
}

pub(crate) fn num(v: f64) -> String {
    if v.is_finite() {
        format!("{v:>10.4}")
    } else {
        format!("{:>10}", "n/a")
    }
}

fn render_fit(r: &FitReport) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "Maximum empirical likelihood fit");
    if let Some(d) = &r.data {
        let _ = writeln!(out, "data: {d}");
    }
    let _ = writeln!(out, "n = {} ({} cases, {} controls)", r.n, r.n1, r.n0);
    let _ = writeln!(out, "constraint: {}; external N = {}; weighting: {}", r.constraint, r.n_external, r.weighting);
    if r.standardization.is_some() {
        let _ = writeln!(out, "covariates standardized with full-data means and sample SDs");
    }
    let _ = writeln!(out);
    let _ = writeln!(out, "{:<18}{:>10}{:>10}{:>10}{:>10}", "parameter", "estimate", "se", "lower", "upper");
    for row in &r.params {
        let _ = writeln!(
            out,
            "{:<18}{}{}{}{}",
            row.name,
            num(row.estimate),
            num(row.se),
            num(row.ci_lower),
            num(row.ci_upper)
        );
    }
    let s = &r.solver;
    let _ = writeln!(out);
    let _ = writeln!(
        out,
        "converged: {}; outer iterations: {}; refits: {}; gradient norm: {:.3e}",
        s.converged, s.outer_iterations, s.refits, s.grad_norm
    );
    if s.tilt_saturated || s.gamma_at_bound || s.init_gamma_clamped {
        let _ = writeln!(
            out,
            "warnings: tilt saturated = {}, gamma at bound = {}, initial gamma clamped = {}",
            s.tilt_saturated, s.gamma_at_bound, s.init_gamma_clamped
        );
    }
    if let Some(m) = &r.mle {
        let _ = writeln!(out);
        let _ = writeln!(out, "internal-only logistic MLE (case proportion {:.4})", m.case_proportion);
        for row in &m.params {
            let _ = writeln!(out, "{:<18}{}{}", row.name, num(row.estimate), num(row.se));
        }
    }
    out
}

fn render_mc(r: &McReport) -> String {
    let mut out = String::new();
    let s = &r.scheme;
    let _ = writeln!(out, "Monte Carlo study, scheme {}", s.name);
    let _ = writeln!(
        out,
        "alpha = {}, beta = {:?}, n0 = {}, n1 = {}, N = {}",
        s.alpha,
        s.beta,
        s.n0,
        s.n1,
        s.n_external()
    );
    let _ = writeln!(out, "replications: {}; master seed: {}; true case proportion: {:.4}", r.reps, r.master_seed, r.p_true);
    for e in &r.estimators {
        let _ = writeln!(out);
        let _ = writeln!(
            out,
            "{} ({} ok, {} failed{})",
            e.estimator.label(),
            e.succeeded,
            e.failed,
            if e.flagged { ", FLAGGED" } else { "" }
        );
        let _ = writeln!(out, "{:<10}{:>10}{:>10}{:>10}{:>10}{:>10}", "param", "truth", "bias", "emp sd", "mean se", "coverage");
        for p in &e.params {
            let _ = writeln!(
                out,
                "{:<10}{}{}{}{}{}",
                p.name,
                num(p.truth),
                num(p.bias),
                num(p.emp_sd.unwrap_or(f64::NAN)),
                num(p.mean_se),
                num(p.coverage)
            );
        }
        let _ = writeln!(out, "{:<10}{:>10}{}", "pi", "", num(e.pi_bias));
        if e.mean_refits > 0.0 {
            let _ = writeln!(out, "mean refits: {:.2}", e.mean_refits);
        }
        for msg in &e.failure_samples {
            let _ = writeln!(out, "  failure: {msg}");
        }
    }
    out
}
