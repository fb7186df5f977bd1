//! Split-sample replication on a real cohort: one half plays the internal
//! case-control study, the other half supplies the external covariate means.

use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector};
use rand::seq::{index, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::AnalyzeConfig;
use super::dataset::{Dataset, Standardization};
use super::report::num;
use crate::baselines::fit_prospective_mle;
use crate::el::SolverConfig;
use crate::error::{Error, Result};
use crate::inference::algorithm1;
use crate::model::{ConstraintSpec, WeightSpec};
use crate::simulation::replication_seed;
use crate::{External, Sample};

/// One row of the results table: averages over replications, or a single
/// fit for the full-data benchmark.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalyzeRow {
    pub method: String,
    pub alpha: f64,
    pub beta: Vec<f64>,
    /// Mean estimated standard errors of `(alpha, beta)`.
    pub se: Vec<f64>,
    /// Spread of the estimates across replications; absent for single fits.
    pub emp_sd: Option<Vec<f64>>,
    pub case_proportion: f64,
    pub succeeded: usize,
    pub failed: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalyzeReport {
    pub data: String,
    pub n: usize,
    pub n1: usize,
    pub n0: usize,
    pub covariates: Vec<String>,
    /// Present when covariates were z-scored with full-data moments before
    /// any split.
    pub standardization: Option<Standardization>,
    pub constraint: String,
    pub seed: u64,
    pub reps: usize,
    pub cases: usize,
    pub controls: usize,
    pub half_size: usize,
    pub rows: Vec<AnalyzeRow>,
    pub failure_samples: Vec<String>,
}

impl AnalyzeReport {
    pub fn row(&self, method: &str) -> Option<&AnalyzeRow> {
        self.rows.iter().find(|r| r.method == method)
    }
}

pub const FULL_DATA: &str = "full data MLE";
pub const INTERNAL_MLE: &str = "internal MLE";
pub const MELE: &str = "MELE optimal W";

#[derive(Debug, Clone)]
struct RepFit {
    alpha: f64,
    beta: Vec<f64>,
    se: Vec<f64>,
    case_proportion: f64,
}

struct Split {
    sample: Sample,
    mu_tilde: DVector<f64>,
}

fn split(data: &Sample, spec: &ConstraintSpec<f64>, cfg: &AnalyzeConfig, rng: &mut ChaCha20Rng) -> Result<Split> {
    let n = data.n();
    let half = n / 2;
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(rng);
    let (internal, external) = (&perm[..half], &perm[half..2 * half]);
    let y = data.outcomes();
    let cases: Vec<usize> = internal.iter().copied().filter(|&i| y[i] == 1).collect();
    let controls: Vec<usize> = internal.iter().copied().filter(|&i| y[i] == 0).collect();
    if cases.len() < cfg.cases || controls.len() < cfg.controls {
        return Err(Error::Protocol(format!(
            "internal half has {} cases and {} controls; {} and {} are required",
            cases.len(),
            controls.len(),
            cfg.cases,
            cfg.controls
        )));
    }
    let mut rows: Vec<usize> = index::sample(rng, cases.len(), cfg.cases).into_iter().map(|k| cases[k]).collect();
    rows.extend(index::sample(rng, controls.len(), cfg.controls).into_iter().map(|k| controls[k]));
    let x = data.covariates();
    let p = data.p();
    let sub = DMatrix::from_fn(rows.len(), p, |r, j| x[(rows[r], j)]);
    let mut outcomes = vec![1u8; cfg.cases];
    outcomes.resize(cfg.cases + cfg.controls, 0);
    let mut mu_tilde = DVector::zeros(spec.q());
    for &i in external {
        mu_tilde += spec.apply(&data.row(i));
    }
    mu_tilde /= half as f64;
    Ok(Split { sample: Sample::new(outcomes, sub)?, mu_tilde })
}

type RepOutcome = (std::result::Result<RepFit, String>, std::result::Result<RepFit, String>);

fn run_rep(data: &Sample, spec: &ConstraintSpec<f64>, cfg: &AnalyzeConfig, solver: &SolverConfig, seed: u64) -> Result<RepOutcome> {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let s = split(data, spec, cfg, &mut rng)?;
    let p = data.p();
    let mle = fit_prospective_mle(&s.sample, solver)
        .map(|m| RepFit {
            alpha: m.alpha,
            beta: m.beta.iter().copied().collect(),
            se: m.se.iter().copied().collect(),
            case_proportion: m.naive_case_prop,
        })
        .map_err(|e| e.to_string());
    let half = data.n() / 2;
    let external = External::new(s.mu_tilde, half, WeightSpec::Optimal)?;
    let mele = algorithm1(&s.sample, &external, spec, solver)
        .map(|o| RepFit {
            alpha: o.fit.alpha(),
            beta: o.fit.theta.beta.iter().copied().collect(),
            se: o.covariance.se_regression(p).iter().copied().collect(),
            case_proportion: o.fit.case_proportion(),
        })
        .map_err(|e| e.to_string());
    Ok((mle, mele))
}

fn aggregate(method: &str, fits: &[&std::result::Result<RepFit, String>], p: usize) -> AnalyzeRow {
    let ok: Vec<&RepFit> = fits.iter().filter_map(|r| r.as_ref().ok()).collect();
    let m = ok.len() as f64;
    let mean = |f: &dyn Fn(&RepFit) -> f64| if ok.is_empty() { f64::NAN } else { ok.iter().map(|r| f(r)).sum::<f64>() / m };
    let sd = |f: &dyn Fn(&RepFit) -> f64| {
        let mu = mean(f);
        (ok.iter().map(|r| (f(r) - mu).powi(2)).sum::<f64>() / (m - 1.0)).sqrt()
    };
    AnalyzeRow {
        method: method.to_string(),
        alpha: mean(&|r| r.alpha),
        beta: (0..p).map(|j| mean(&|r| r.beta[j])).collect(),
        se: (0..=p).map(|j| mean(&|r| r.se[j])).collect(),
        emp_sd: (ok.len() >= 2).then(|| {
            let mut v = vec![sd(&|r| r.alpha)];
            v.extend((0..p).map(|j| sd(&|r| r.beta[j])));
            v
        }),
        case_proportion: mean(&|r| r.case_proportion),
        succeeded: ok.len(),
        failed: fits.len() - ok.len(),
    }
}

/// Full-data logistic benchmark plus `cfg.reps` seeded split-sample
/// replications comparing the internal-only MLE with the optimally weighted
/// empirical likelihood estimator.
pub fn analyze_real(
    dataset: &Dataset,
    label: &str,
    spec: &ConstraintSpec<f64>,
    constraint: &str,
    cfg: &AnalyzeConfig,
    seed: u64,
    solver: &SolverConfig,
) -> Result<AnalyzeReport> {
    solver.validate()?;
    if cfg.reps == 0 || cfg.cases == 0 || cfg.controls == 0 {
        return Err(Error::Config("analyze.reps, analyze.cases and analyze.controls must be positive".into()));
    }
    let data = &dataset.sample;
    let p = data.p();
    if spec.p() != p {
        return Err(Error::Config(format!("constraint expects {} covariates, data has {p}", spec.p())));
    }
    let full = fit_prospective_mle(data, solver)?;
    let outcomes: Vec<RepOutcome> = (0..cfg.reps)
        .into_par_iter()
        .map(|r| run_rep(data, spec, cfg, solver, replication_seed(seed, r as u64)))
        .collect::<Result<_>>()?;
    let mles: Vec<_> = outcomes.iter().map(|o| &o.0).collect();
    let meles: Vec<_> = outcomes.iter().map(|o| &o.1).collect();
    let failure_samples = outcomes
        .iter()
        .enumerate()
        .flat_map(|(r, o)| {
            [(INTERNAL_MLE, &o.0), (MELE, &o.1)]
                .into_iter()
                .filter_map(move |(m, res)| res.as_ref().err().map(|e| format!("rep {r} {m}: {e}")))
        })
        .take(5)
        .collect();
    let full_row = AnalyzeRow {
        method: FULL_DATA.to_string(),
        alpha: full.alpha,
        beta: full.beta.iter().copied().collect(),
        se: full.se.iter().copied().collect(),
        emp_sd: None,
        case_proportion: full.naive_case_prop,
        succeeded: 1,
        failed: 0,
    };
    Ok(AnalyzeReport {
        data: label.to_string(),
        n: data.n(),
        n1: data.n1(),
        n0: data.n0(),
        covariates: dataset.covariate_names.clone(),
        standardization: dataset.standardization.clone(),
        constraint: constraint.to_string(),
        seed,
        reps: cfg.reps,
        cases: cfg.cases,
        controls: cfg.controls,
        half_size: data.n() / 2,
        rows: vec![full_row, aggregate(MELE, &meles, p), aggregate(INTERNAL_MLE, &mles, p)],
        failure_samples,
    })
}

pub(crate) fn render(r: &AnalyzeReport) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "Split-sample analysis of {}", r.data);
    let _ = writeln!(out, "n = {} ({} cases, {} controls); halves of {}", r.n, r.n1, r.n0, r.half_size);
    let _ = writeln!(
        out,
        "{} replications, seed {}: {} cases and {} controls per internal sample; constraint: {}",
        r.reps, r.seed, r.cases, r.controls, r.constraint
    );
    if r.standardization.is_some() {
        let _ = writeln!(out, "covariates standardized with full-data means and sample SDs before splitting");
    }
    let _ = writeln!(out);
    let mut header = format!("{:<18}{:<10}{:>10}", "method", "", "alpha");
    for name in &r.covariates {
        let _ = write!(header, "{:>10}", truncate(name, 9));
    }
    let _ = write!(header, "{:>10}", "case prop");
    let _ = writeln!(out, "{header}");
    for row in &r.rows {
        let mut line = format!("{:<18}{:<10}{}", row.method, "estimate", num(row.alpha));
        for b in &row.beta {
            line.push_str(&num(*b));
        }
        line.push_str(&num(row.case_proportion));
        let _ = writeln!(out, "{line}");
        let mut line = format!("{:<18}{:<10}", "", "se");
        for s in &row.se {
            line.push_str(&num(*s));
        }
        let _ = writeln!(out, "{line}");
        if let Some(sd) = &row.emp_sd {
            let mut line = format!("{:<18}{:<10}", "", "emp sd");
            for s in sd {
                line.push_str(&num(*s));
            }
            let _ = writeln!(out, "{line}");
        }
        if row.failed > 0 {
            let _ = writeln!(out, "{:<18}{} of {} replications failed", "", row.failed, row.failed + row.succeeded);
        }
    }
    for msg in &r.failure_samples {
        let _ = writeln!(out, "  failure: {msg}");
    }
    out
}

fn truncate(s: &str, n: usize) -> String {
    s.chars().take(n).collect()
}
