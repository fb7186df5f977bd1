//! Data generating schemes, case-control sampling by rejection, and a seeded
//! Monte Carlo runner reporting bias, spread, estimated standard errors and
//! Wald coverage.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baselines::fit_prospective_mle;
use crate::el::SolverConfig;
use crate::error::{Error, Result};
use crate::inference::{algorithm1, fit_external, wald_ci};
use crate::model::{sigmoid, ConstraintSpec, WeightSpec};
use crate::{External, Sample};

/// Population draws allowed before giving up on filling the quotas.
pub const DRAW_BUDGET: u64 = 1_000_000_000;

/// Share of failed replications above which a report is flagged.
pub const FAILURE_FLAG_RATE: f64 = 0.02;

const LEVEL: f64 = 0.95;

/// Logistic data generating scheme with standard normal covariates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scheme {
    pub name: String,
    pub alpha: f64,
    pub beta: Vec<f64>,
    pub n0: usize,
    pub n1: usize,
    /// External sample size as a multiple of `n = n0 + n1`; zero means none.
    pub external_multiplier: usize,
    /// Tabulated marginal case proportion.
    pub p_true: f64,
}

impl Scheme {
    fn table(name: &str, alpha: f64, beta: [f64; 2], n0: usize, n1: usize, p_true: f64) -> Self {
        Self {
            name: name.to_string(),
            alpha,
            beta: beta.to_vec(),
            n0,
            n1,
            external_multiplier: 1,
            p_true,
        }
    }

    pub fn a1() -> Self {
        Self::table("A1", -5.0, [-2.0, 2.0], 4000, 800, 0.067)
    }
    pub fn a2() -> Self {
        Self::table("A2", -4.0, [2.0, 1.0], 4000, 800, 0.116)
    }
    pub fn b1() -> Self {
        Self::table("B1", -5.0, [-2.0, 2.0], 3000, 1500, 0.067)
    }
    pub fn b2() -> Self {
        Self::table("B2", -4.0, [2.0, 1.0], 3000, 1500, 0.116)
    }
    pub fn c1() -> Self {
        Self::table("C1", -5.0, [-2.0, 2.0], 2000, 2000, 0.067)
    }
    pub fn c2() -> Self {
        Self::table("C2", -4.0, [2.0, 1.0], 2000, 2000, 0.116)
    }

    pub fn all() -> Vec<Self> {
        vec![Self::a1(), Self::a2(), Self::b1(), Self::b2(), Self::c1(), Self::c2()]
    }

    /// Looks up one of the built-in schemes by name, case-insensitively.
    pub fn by_name(name: &str) -> Option<Self> {
        Self::all().into_iter().find(|s| s.name.eq_ignore_ascii_case(name))
    }

    pub fn with_multiplier(mut self, m: usize) -> Self {
        self.external_multiplier = m;
        self
    }

    pub fn p(&self) -> usize {
        self.beta.len()
    }

    pub fn n(&self) -> usize {
        self.n0 + self.n1
    }

    pub fn n_external(&self) -> usize {
        self.external_multiplier * self.n()
    }

    /// `n1 / n`, the case share of the design.
    pub fn q_design(&self) -> f64 {
        self.n1 as f64 / self.n() as f64
    }

    /// `P(Y = 1)` by quadrature. With standard normal covariates `beta'X` is
    /// normal with variance `|beta|^2`, so a one dimensional integral suffices.
    pub fn marginal_case_proportion(&self) -> f64 {
        let s = self.beta.iter().map(|b| b * b).sum::<f64>().sqrt();
        // composite Simpson on [-12, 12]
        let m = 4000;
        let (a, b) = (-12.0, 12.0);
        let h = (b - a) / m as f64;
        let f = |z: f64| sigmoid(self.alpha + s * z) * (-0.5 * z * z).exp();
        let mut acc = f(a) + f(b);
        for k in 1..m {
            let z = a + k as f64 * h;
            acc += if k % 2 == 1 { 4.0 } else { 2.0 } * f(z);
        }
        acc * h / 3.0 / (2.0 * std::f64::consts::PI).sqrt()
    }

    pub fn validate(&self) -> Result<()> {
        if self.beta.is_empty() {
            return Err(Error::Config(format!("scheme {}: beta is empty", self.name)));
        }
        if self.n0 == 0 || self.n1 == 0 {
            return Err(Error::Config(format!("scheme {}: n0 and n1 must be positive", self.name)));
        }
        if !self.alpha.is_finite() || self.beta.iter().any(|b| !b.is_finite()) {
            return Err(Error::Config(format!("scheme {}: non-finite coefficients", self.name)));
        }
        Ok(())
    }
}

/// Counter-based seed derivation (SplitMix64 finalizer).
pub fn replication_seed(master: u64, index: u64) -> u64 {
    let mut z = master.wrapping_add(0x9e37_79b9_7f4a_7c15u64.wrapping_mul(index.wrapping_add(1)));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Output of [`draw_population_stream`].
#[derive(Debug, Clone, PartialEq)]
pub struct StreamStats {
    pub draws: u64,
    pub cases: u64,
}

/// Draws `draws` population units and counts the cases.
pub fn draw_population_stream(scheme: &Scheme, draws: u64, seed: u64) -> StreamStats {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let p = scheme.p();
    let mut cases = 0;
    for _ in 0..draws {
        let mut eta = scheme.alpha;
        for j in 0..p {
            let z: f64 = rng.sample(StandardNormal);
            eta += scheme.beta[j] * z;
        }
        if rng.random::<f64>() < sigmoid(eta) {
            cases += 1;
        }
    }
    StreamStats { draws, cases }
}

/// Simulated internal case-control sample and, when the scheme asks for
/// one, the external summary (covariate means of `N` fresh population draws).
pub fn generate_scheme(scheme: &Scheme, seed: u64) -> Result<(Sample, Option<External>)> {
    generate_with_budget(scheme, seed, DRAW_BUDGET)
}

pub fn generate_with_budget(scheme: &Scheme, seed: u64, budget: u64) -> Result<(Sample, Option<External>)> {
    scheme.validate()?;
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let p = scheme.p();
    let mut cases = Vec::with_capacity(scheme.n1 * p);
    let mut controls = Vec::with_capacity(scheme.n0 * p);
    let (mut c1, mut c0) = (0, 0);
    let mut x = vec![0.0; p];
    let mut draws = 0u64;
    while c1 < scheme.n1 || c0 < scheme.n0 {
        if draws >= budget {
            return Err(Error::SamplingBudget { budget });
        }
        draws += 1;
        let mut eta = scheme.alpha;
        for j in 0..p {
            x[j] = rng.sample(StandardNormal);
            eta += scheme.beta[j] * x[j];
        }
        let case = rng.random::<f64>() < sigmoid(eta);
        if case && c1 < scheme.n1 {
            cases.extend_from_slice(&x);
            c1 += 1;
        } else if !case && c0 < scheme.n0 {
            controls.extend_from_slice(&x);
            c0 += 1;
        }
    }
    let n = scheme.n();
    let mut outcomes = vec![1u8; scheme.n1];
    outcomes.extend(std::iter::repeat_n(0u8, scheme.n0));
    cases.extend_from_slice(&controls);
    let sample = Sample::new(outcomes, DMatrix::from_row_slice(n, p, &cases))?;

    let n_ext = scheme.n_external();
    let external = if n_ext == 0 {
        None
    } else {
        let mut mean = DVector::zeros(p);
        for _ in 0..n_ext {
            for j in 0..p {
                let z: f64 = rng.sample(StandardNormal);
                mean[j] += z;
            }
        }
        mean /= n_ext as f64;
        Some(External::new(mean, n_ext, WeightSpec::Optimal)?)
    };
    Ok((sample, external))
}

/// Estimators compared by [`run_monte_carlo`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Estimator {
    /// Prospective logistic fit to the case-control sample alone.
    Mle,
    /// Empirical likelihood with the fixed weighting matrix of the run.
    FixedW,
    /// Empirical likelihood with the iterated optimal weighting matrix.
    OptimalV,
    /// Empirical likelihood treating the external mean as exact.
    KnownMu,
}

impl Estimator {
    pub fn label(&self) -> &'static str {
        match self {
            Estimator::Mle => "mle",
            Estimator::FixedW => "fixed_w",
            Estimator::OptimalV => "optimal_v",
            Estimator::KnownMu => "known_mu",
        }
    }

    fn needs_external(&self) -> bool {
        !matches!(self, Estimator::Mle)
    }
}

impl std::str::FromStr for Estimator {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        [Estimator::Mle, Estimator::FixedW, Estimator::OptimalV, Estimator::KnownMu]
            .into_iter()
            .find(|e| e.label() == s)
            .ok_or_else(|| format!("unknown estimator '{s}' (expected mle, fixed_w, optimal_v or known_mu)"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct McConfig {
    pub estimators: Vec<Estimator>,
    pub reps: usize,
    pub master_seed: u64,
    /// Weighting matrix for [`Estimator::FixedW`], row major; defaults to
    /// `diag(0.2, 2)` for two covariates and the identity otherwise.
    pub fixed_w: Option<Vec<f64>>,
    pub solver: SolverConfig,
}

impl Default for McConfig {
    fn default() -> Self {
        Self {
            estimators: vec![Estimator::Mle, Estimator::FixedW, Estimator::OptimalV],
            reps: 200,
            master_seed: 1,
            fixed_w: None,
            solver: SolverConfig::default(),
        }
    }
}

impl McConfig {
    fn weight_matrix(&self, q: usize) -> Result<DMatrix<f64>> {
        match &self.fixed_w {
            Some(v) if v.len() == q * q => Ok(DMatrix::from_row_slice(q, q, v)),
            Some(v) => Err(Error::Config(format!(
                "simulate.fixed_w has {} entries, expected {}",
                v.len(),
                q * q
            ))),
            None if q == 2 => Ok(DMatrix::from_diagonal(&DVector::from_column_slice(&[0.2, 2.0]))),
            None => Ok(DMatrix::identity(q, q)),
        }
    }
}

/// Estimates and standard errors of one estimator on one replication.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepEstimate {
    pub alpha: f64,
    pub beta: Vec<f64>,
    pub pi: f64,
    pub se_alpha: f64,
    pub se_beta: Vec<f64>,
    pub refits: usize,
}

/// Everything recorded for one replication, in estimator order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepRecord {
    pub index: usize,
    pub seed: u64,
    pub results: Vec<std::result::Result<RepEstimate, String>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamSummary {
    pub name: String,
    pub truth: f64,
    #[serde(with = "crate::serde_nan")]
    pub bias: f64,
    /// Empirical standard deviation; absent with fewer than two estimates.
    pub emp_sd: Option<f64>,
    #[serde(with = "crate::serde_nan")]
    pub mean_se: f64,
    #[serde(with = "crate::serde_nan")]
    pub coverage: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimatorSummary {
    pub estimator: Estimator,
    pub succeeded: usize,
    pub failed: usize,
    pub params: Vec<ParamSummary>,
    #[serde(with = "crate::serde_nan")]
    pub pi_bias: f64,
    #[serde(with = "crate::serde_nan")]
    pub mean_refits: f64,
    /// Failure share above the flag rate.
    pub flagged: bool,
    /// First few failure messages, for diagnosis.
    pub failure_samples: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McReport {
    pub scheme: Scheme,
    pub reps: usize,
    pub master_seed: u64,
    /// Marginal case proportion used as the truth for `pi` bias.
    pub p_true: f64,
    pub estimators: Vec<EstimatorSummary>,
    #[serde(skip)]
    pub records: Vec<RepRecord>,
}

impl McReport {
    pub fn summary(&self, est: Estimator) -> Option<&EstimatorSummary> {
        self.estimators.iter().find(|s| s.estimator == est)
    }
}

fn run_one(scheme: &Scheme, cfg: &McConfig, index: usize) -> RepRecord {
    let seed = replication_seed(cfg.master_seed, index as u64);
    let data = generate_scheme(scheme, seed);
    let results = cfg
        .estimators
        .iter()
        .map(|&est| match &data {
            Ok((sample, external)) => estimate(est, sample, external.as_ref(), cfg).map_err(|e| e.to_string()),
            Err(e) => Err(e.to_string()),
        })
        .collect();
    RepRecord { index, seed, results }
}

fn estimate(est: Estimator, sample: &Sample, external: Option<&External>, cfg: &McConfig) -> Result<RepEstimate> {
    let p = sample.p();
    if est.needs_external() && external.is_none() {
        return Err(Error::invalid("estimator needs an external summary"));
    }
    if est == Estimator::Mle {
        let mle = fit_prospective_mle(sample, &cfg.solver)?;
        return Ok(RepEstimate {
            alpha: mle.alpha,
            beta: mle.beta.iter().copied().collect(),
            pi: mle.naive_case_prop,
            se_alpha: mle.se[0],
            se_beta: mle.se.iter().skip(1).copied().collect(),
            refits: 0,
        });
    }
    let external = external.expect("checked above");
    let spec = ConstraintSpec::identity(p)?;
    let (fit, cov, refits) = match est {
        Estimator::FixedW => {
            let ext = external.with_weight(WeightSpec::Given(cfg.weight_matrix(external.q())?))?;
            let f = fit_external(sample, &ext, &spec, &cfg.solver)?;
            (f.fit, f.covariance, 0)
        }
        Estimator::OptimalV => {
            let o = algorithm1(sample, external, &spec, &cfg.solver)?;
            (o.fit, o.covariance, o.refits)
        }
        Estimator::KnownMu => {
            let ext = external.with_weight(WeightSpec::Population)?;
            let f = fit_external(sample, &ext, &spec, &cfg.solver)?;
            (f.fit, f.covariance, 0)
        }
        Estimator::Mle => unreachable!(),
    };
    Ok(RepEstimate {
        alpha: fit.alpha(),
        beta: fit.theta.beta.iter().copied().collect(),
        pi: fit.case_proportion(),
        se_alpha: cov.se_alpha,
        se_beta: (0..p).map(|j| cov.se_theta[2 + j]).collect(),
        refits,
    })
}

/// Runs `cfg.reps` seeded replications, in parallel, and aggregates them in
/// replication order so the report does not depend on scheduling.
pub fn run_monte_carlo(scheme: &Scheme, cfg: &McConfig) -> Result<McReport> {
    scheme.validate()?;
    cfg.solver.validate()?;
    if cfg.reps == 0 {
        return Err(Error::Config("simulate.reps must be at least 1".into()));
    }
    if cfg.estimators.is_empty() {
        return Err(Error::Config("simulate.estimators is empty".into()));
    }
    if cfg.estimators.iter().any(|e| e.needs_external()) && scheme.external_multiplier == 0 {
        return Err(Error::Config(format!(
            "scheme {} has no external data but external estimators were requested",
            scheme.name
        )));
    }
    cfg.weight_matrix(scheme.p())?;
    let mut records: Vec<RepRecord> = (0..cfg.reps).into_par_iter().map(|i| run_one(scheme, cfg, i)).collect();
    records.sort_by_key(|r| r.index);
    let p_true = scheme.marginal_case_proportion();
    let estimators = cfg
        .estimators
        .iter()
        .enumerate()
        .map(|(k, &est)| summarize(scheme, p_true, est, k, &records))
        .collect();
    Ok(McReport {
        scheme: scheme.clone(),
        reps: cfg.reps,
        master_seed: cfg.master_seed,
        p_true,
        estimators,
        records,
    })
}

fn summarize(scheme: &Scheme, p_true: f64, est: Estimator, k: usize, records: &[RepRecord]) -> EstimatorSummary {
    let ok: Vec<&RepEstimate> = records.iter().filter_map(|r| r.results[k].as_ref().ok()).collect();
    let failures: Vec<String> = records
        .iter()
        .filter_map(|r| r.results[k].as_ref().err().map(|e| format!("rep {}: {e}", r.index)))
        .collect();
    let p = scheme.p();
    let mut params = Vec::with_capacity(1 + p);
    let mut push = |name: String, truth: f64, est: &dyn Fn(&RepEstimate) -> (f64, f64)| {
        let pairs: Vec<(f64, f64)> = ok.iter().map(|r| est(r)).collect();
        params.push(param_summary(name, truth, &pairs));
    };
    push("alpha".into(), scheme.alpha, &|r| (r.alpha, r.se_alpha));
    for j in 0..p {
        push(format!("beta{}", j + 1), scheme.beta[j], &|r| (r.beta[j], r.se_beta[j]));
    }
    let m = ok.len().max(1) as f64;
    let pi_bias = if ok.is_empty() { f64::NAN } else { ok.iter().map(|r| r.pi).sum::<f64>() / m - p_true };
    let mean_refits = ok.iter().map(|r| r.refits as f64).sum::<f64>() / m;
    let failed = failures.len();
    EstimatorSummary {
        estimator: est,
        succeeded: ok.len(),
        failed,
        params,
        pi_bias,
        mean_refits,
        flagged: failed as f64 > FAILURE_FLAG_RATE * records.len() as f64,
        failure_samples: failures.into_iter().take(5).collect(),
    }
}

fn param_summary(name: String, truth: f64, pairs: &[(f64, f64)]) -> ParamSummary {
    let m = pairs.len();
    if m == 0 {
        return ParamSummary { name, truth, bias: f64::NAN, emp_sd: None, mean_se: f64::NAN, coverage: f64::NAN };
    }
    let mf = m as f64;
    let mean = pairs.iter().map(|p| p.0).sum::<f64>() / mf;
    let emp_sd = (m >= 2).then(|| (pairs.iter().map(|p| (p.0 - mean).powi(2)).sum::<f64>() / (mf - 1.0)).sqrt());
    let mean_se = pairs.iter().map(|p| p.1).sum::<f64>() / mf;
    let hits = pairs
        .iter()
        .filter(|&&(e, se)| {
            let (lo, hi) = wald_ci(e, se, LEVEL);
            lo <= truth && truth <= hi
        })
        .count();
    ParamSummary { name, truth, bias: mean - truth, emp_sd, mean_se, coverage: hits as f64 / mf }
}
