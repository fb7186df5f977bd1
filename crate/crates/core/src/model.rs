//! Domain types and elementary model evaluations.
//!
//! The parameter vector is always laid out as `(gamma, alpha_star, beta, mu)`:
//!
//! * `gamma = log P(Y=0) / P(Y=1)`
//! * `alpha_star = gamma + alpha`, the intercept of the exponential tilt
//!   `f1(x) = exp(alpha_star + beta'x) f0(x)`
//! * `beta`, the log odds ratio slopes
//! * `mu = E h(X)`, the population mean of the constraint transform.
//!
//! Everything here is generic over the floating point type; the estimation
//! routines built on top use `f64`.

use nalgebra::{DMatrix, DVector, RealField};

use crate::error::{Error, Result};

/// Floating point scalar accepted by the model layer (`f32` or `f64`).
pub trait Scalar: RealField + Copy {}

impl<T: RealField + Copy> Scalar for T {}

#[inline]
pub(crate) fn lit<T: Scalar>(v: f64) -> T {
    nalgebra::convert(v)
}

/// Largest magnitude allowed for `log(delta)`. For `f64` this keeps the tilt
/// inside `[1e-300, 1e300]`.
pub fn tilt_log_bound<T: Scalar>() -> T {
    let max_ln = T::max_value().map(|m| m.ln()).unwrap_or_else(|| lit(709.0));
    if max_ln > lit(700.0) {
        lit(300.0 * std::f64::consts::LN_10)
    } else {
        max_ln * lit(0.95)
    }
}

fn linear_predictor<T: Scalar>(x: &[T], intercept: T, slope: &[T]) -> Result<T> {
    if x.len() != slope.len() {
        return Err(Error::invalid(format!(
            "covariate length {} does not match slope length {}",
            x.len(),
            slope.len()
        )));
    }
    let eta = x
        .iter()
        .zip(slope)
        .fold(intercept, |acc, (&xi, &bi)| acc + xi * bi);
    if !eta.is_finite() {
        return Err(Error::invalid("non-finite linear predictor"));
    }
    Ok(eta)
}

/// `P(Y=1 | x)` under the logistic model, evaluated without overflow.
pub fn logistic_prob<T: Scalar>(x: &[T], alpha: T, beta: &[T]) -> Result<T> {
    let eta = linear_predictor(x, alpha, beta)?;
    Ok(sigmoid(eta))
}

#[inline]
pub(crate) fn sigmoid<T: Scalar>(eta: T) -> T {
    if eta >= T::zero() {
        T::one() / (T::one() + (-eta).exp())
    } else {
        let e = eta.exp();
        e / (T::one() + e)
    }
}

/// Density ratio `f1(x) / f0(x)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Tilt<T> {
    pub value: T,
    /// Set when `log(delta)` hit [`tilt_log_bound`] and was clamped.
    pub saturated: bool,
}

pub fn tilt<T: Scalar>(x: &[T], alpha_star: T, beta: &[T]) -> Result<Tilt<T>> {
    let s = linear_predictor(x, alpha_star, beta)?;
    Ok(tilt_from_log(s))
}

#[inline]
pub(crate) fn tilt_from_log<T: Scalar>(s: T) -> Tilt<T> {
    let bound = tilt_log_bound::<T>();
    if s > bound {
        Tilt { value: bound.exp(), saturated: true }
    } else if s < -bound {
        Tilt { value: (-bound).exp(), saturated: true }
    } else {
        Tilt { value: s.exp(), saturated: false }
    }
}

/// `1 / (1 + exp(gamma))`, the marginal case proportion.
#[inline]
pub fn case_proportion<T: Scalar>(gamma: T) -> T {
    sigmoid(-gamma)
}

/// Full parameter `(gamma, alpha_star, beta, mu)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ThetaFull<T: Scalar> {
    pub gamma: T,
    pub alpha_star: T,
    pub beta: DVector<T>,
    pub mu: DVector<T>,
}

impl<T: Scalar> ThetaFull<T> {
    pub fn new(gamma: T, alpha_star: T, beta: DVector<T>, mu: DVector<T>) -> Self {
        Self { gamma, alpha_star, beta, mu }
    }

    pub fn p(&self) -> usize {
        self.beta.len()
    }

    pub fn q(&self) -> usize {
        self.mu.len()
    }

    /// `2 + p + q`
    pub fn dim(&self) -> usize {
        2 + self.p() + self.q()
    }

    /// Intercept of the prospective logistic model.
    pub fn alpha(&self) -> T {
        self.alpha_star - self.gamma
    }

    pub fn case_proportion(&self) -> T {
        case_proportion(self.gamma)
    }

    pub fn to_vector(&self) -> DVector<T> {
        let mut v = DVector::zeros(self.dim());
        v[0] = self.gamma;
        v[1] = self.alpha_star;
        v.rows_mut(2, self.p()).copy_from(&self.beta);
        v.rows_mut(2 + self.p(), self.q()).copy_from(&self.mu);
        v
    }

    pub fn from_slice(p: usize, q: usize, v: &[T]) -> Result<Self> {
        if v.len() != 2 + p + q {
            return Err(Error::invalid(format!(
                "parameter vector has length {}, expected {}",
                v.len(),
                2 + p + q
            )));
        }
        Ok(Self {
            gamma: v[0],
            alpha_star: v[1],
            beta: DVector::from_column_slice(&v[2..2 + p]),
            mu: DVector::from_column_slice(&v[2 + p..]),
        })
    }

    pub fn is_finite(&self) -> bool {
        self.gamma.is_finite()
            && self.alpha_star.is_finite()
            && self.beta.iter().all(|b| b.is_finite())
            && self.mu.iter().all(|m| m.is_finite())
    }
}

/// Declared transform `h: R^p -> R^q`.
#[derive(Debug, Clone, PartialEq)]
pub enum HMap<T: Scalar> {
    Identity,
    /// Selected covariate coordinates, in the given order.
    Subset(Vec<usize>),
    /// `h(x) = matrix * x + offset`, with `matrix` of shape `q x p`.
    Affine { matrix: DMatrix<T>, offset: DVector<T> },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConstraintSpec<T: Scalar> {
    map: HMap<T>,
    p: usize,
}

impl<T: Scalar> ConstraintSpec<T> {
    pub fn identity(p: usize) -> Result<Self> {
        if p == 0 {
            return Err(Error::invalid("identity constraint needs p >= 1"));
        }
        Ok(Self { map: HMap::Identity, p })
    }

    pub fn subset(p: usize, indices: Vec<usize>) -> Result<Self> {
        if indices.is_empty() {
            return Err(Error::invalid("subset constraint needs at least one coordinate"));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= p) {
            return Err(Error::invalid(format!("subset index {bad} out of range for p = {p}")));
        }
        Ok(Self { map: HMap::Subset(indices), p })
    }

    pub fn affine(matrix: DMatrix<T>, offset: DVector<T>) -> Result<Self> {
        if matrix.nrows() == 0 || matrix.ncols() == 0 {
            return Err(Error::invalid("affine constraint matrix is empty"));
        }
        if offset.len() != matrix.nrows() {
            return Err(Error::invalid("affine offset length must equal matrix rows"));
        }
        if matrix.iter().chain(offset.iter()).any(|v| !v.is_finite()) {
            return Err(Error::invalid("affine constraint has non-finite entries"));
        }
        let p = matrix.ncols();
        Ok(Self { map: HMap::Affine { matrix, offset }, p })
    }

    pub fn map(&self) -> &HMap<T> {
        &self.map
    }

    pub fn p(&self) -> usize {
        self.p
    }

    pub fn q(&self) -> usize {
        match &self.map {
            HMap::Identity => self.p,
            HMap::Subset(idx) => idx.len(),
            HMap::Affine { matrix, .. } => matrix.nrows(),
        }
    }

    /// The same transform keeping only its first `k` outputs.
    pub fn leading(&self, k: usize) -> Result<Self> {
        if k == 0 || k > self.q() {
            return Err(Error::invalid(format!("cannot keep {k} of {} outputs", self.q())));
        }
        let map = match &self.map {
            HMap::Identity => HMap::Subset((0..k).collect()),
            HMap::Subset(idx) => HMap::Subset(idx[..k].to_vec()),
            HMap::Affine { matrix, offset } => HMap::Affine {
                matrix: matrix.rows(0, k).into_owned(),
                offset: offset.rows(0, k).into_owned(),
            },
        };
        Ok(Self { map, p: self.p })
    }

    pub fn apply_into(&self, x: &[T], out: &mut [T]) {
        debug_assert_eq!(x.len(), self.p);
        match &self.map {
            HMap::Identity => out.copy_from_slice(x),
            HMap::Subset(idx) => {
                for (o, &i) in out.iter_mut().zip(idx) {
                    *o = x[i];
                }
            }
            HMap::Affine { matrix, offset } => {
                for (k, o) in out.iter_mut().enumerate() {
                    let mut acc = offset[k];
                    for (j, &xj) in x.iter().enumerate() {
                        acc += matrix[(k, j)] * xj;
                    }
                    *o = acc;
                }
            }
        }
    }

    pub fn apply(&self, x: &[T]) -> DVector<T> {
        let mut out = DVector::zeros(self.q());
        self.apply_into(x, out.as_mut_slice());
        out
    }

    /// `h` applied to every row, as an `n x q` matrix.
    pub fn h_matrix(&self, covariates: &DMatrix<T>) -> DMatrix<T> {
        let n = covariates.nrows();
        let mut out = DMatrix::zeros(n, self.q());
        let mut row = vec![T::zero(); self.p];
        let mut hx = vec![T::zero(); self.q()];
        for i in 0..n {
            for (j, r) in row.iter_mut().enumerate() {
                *r = covariates[(i, j)];
            }
            self.apply_into(&row, &mut hx);
            for (k, &v) in hx.iter().enumerate() {
                out[(i, k)] = v;
            }
        }
        out
    }
}

/// `H(x; theta)` and, optionally, its Jacobian with column blocks
/// `(gamma | alpha_star | beta | mu)`.
#[derive(Debug, Clone, PartialEq)]
pub struct HValue<T: Scalar> {
    pub value: DVector<T>,
    pub jacobian: Option<DMatrix<T>>,
    pub saturated: bool,
}

pub fn eval_h<T: Scalar>(
    x: &[T],
    theta: &ThetaFull<T>,
    spec: &ConstraintSpec<T>,
    with_jacobian: bool,
) -> Result<HValue<T>> {
    let (p, q) = (theta.p(), theta.q());
    if x.len() != p || spec.p() != p {
        return Err(Error::invalid(format!(
            "dimension mismatch: x has {}, beta has {p}, constraint expects {}",
            x.len(),
            spec.p()
        )));
    }
    if spec.q() != q {
        return Err(Error::invalid(format!(
            "constraint has {} outputs but mu has {q}",
            spec.q()
        )));
    }
    if !theta.is_finite() {
        return Err(Error::invalid("non-finite parameter"));
    }
    let Tilt { value: delta, saturated } = tilt(x, theta.alpha_star, theta.beta.as_slice())?;
    let hx = spec.apply(x);
    let w = case_proportion(theta.gamma);
    // (delta + e^gamma) / (1 + e^gamma)
    let mix = delta * w + (T::one() - w);

    let mut value = DVector::zeros(1 + q);
    value[0] = delta - T::one();
    for k in 0..q {
        value[1 + k] = mix * hx[k] - theta.mu[k];
    }

    let jacobian = with_jacobian.then(|| {
        let d = 2 + p + q;
        let mut jac = DMatrix::zeros(1 + q, d);
        jac[(0, 1)] = delta;
        for j in 0..p {
            jac[(0, 2 + j)] = delta * x[j];
        }
        // d mix / d gamma = e^gamma (1 - delta) / (1 + e^gamma)^2
        let mix_gamma = (T::one() - delta) * w * (T::one() - w);
        for k in 0..q {
            let r = 1 + k;
            jac[(r, 0)] = mix_gamma * hx[k];
            jac[(r, 1)] = delta * w * hx[k];
            for j in 0..p {
                jac[(r, 2 + j)] = delta * w * hx[k] * x[j];
            }
            jac[(r, 2 + p + k)] = -T::one();
        }
        jac
    });

    Ok(HValue { value, jacobian, saturated })
}

/// Individual-level case-control data.
#[derive(Debug, Clone, PartialEq)]
pub struct CaseControlSample<T: Scalar> {
    outcomes: Vec<u8>,
    covariates: DMatrix<T>,
    n1: usize,
    n0: usize,
}

impl<T: Scalar> CaseControlSample<T> {
    /// Validates labels, finiteness, group counts and that the covariates are
    /// not confined to a lower dimensional affine subspace.
    pub fn new(outcomes: Vec<u8>, covariates: DMatrix<T>) -> Result<Self> {
        let n = outcomes.len();
        if covariates.nrows() != n {
            return Err(Error::invalid(format!(
                "{} outcomes but {} covariate rows",
                n,
                covariates.nrows()
            )));
        }
        if covariates.ncols() == 0 {
            return Err(Error::invalid("no covariates"));
        }
        if let Some(bad) = outcomes.iter().position(|&y| y > 1) {
            return Err(Error::invalid(format!("outcome at row {bad} is not 0 or 1")));
        }
        if covariates.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("covariates contain non-finite values"));
        }
        let n1 = outcomes.iter().filter(|&&y| y == 1).count();
        let n0 = n - n1;
        if n1 == 0 || n0 == 0 {
            return Err(Error::invalid(format!("need at least one case and one control (n1={n1}, n0={n0})")));
        }
        let p = covariates.ncols();
        let rank = centered_rank(&covariates);
        if rank < p {
            return Err(Error::RankDeficient { rank, expected: p });
        }
        Ok(Self { outcomes, covariates, n1, n0 })
    }

    pub fn outcomes(&self) -> &[u8] {
        &self.outcomes
    }

    pub fn covariates(&self) -> &DMatrix<T> {
        &self.covariates
    }

    pub fn n(&self) -> usize {
        self.outcomes.len()
    }

    pub fn n1(&self) -> usize {
        self.n1
    }

    pub fn n0(&self) -> usize {
        self.n0
    }

    pub fn p(&self) -> usize {
        self.covariates.ncols()
    }

    /// `n1 / n0`
    pub fn rho(&self) -> T {
        lit::<T>(self.n1 as f64) / lit::<T>(self.n0 as f64)
    }

    pub fn row(&self, i: usize) -> Vec<T> {
        self.covariates.row(i).iter().copied().collect()
    }

    pub fn control_indices(&self) -> impl Iterator<Item = usize> + '_ {
        self.outcomes.iter().enumerate().filter(|(_, &y)| y == 0).map(|(i, _)| i)
    }
}

fn centered_rank<T: Scalar>(x: &DMatrix<T>) -> usize {
    let n = x.nrows();
    let mut centered = x.clone();
    let nn: T = lit(n as f64);
    for mut col in centered.column_iter_mut() {
        let mean = col.sum() / nn;
        col.add_scalar_mut(-mean);
    }
    let sv = centered.singular_values();
    let max = sv.iter().fold(T::zero(), |m, &s| if s > m { s } else { m });
    if max <= T::zero() {
        return 0;
    }
    let tol = max * lit::<T>(n.max(x.ncols()) as f64) * T::default_epsilon() * lit(16.0);
    sv.iter().filter(|&&s| s > tol).count()
}

/// How the external summary enters the objective.
#[derive(Debug, Clone, PartialEq)]
pub enum WeightSpec<T: Scalar> {
    /// A fixed symmetric positive definite `q x q` weighting matrix.
    Given(DMatrix<T>),
    /// Use the internally estimated covariance of `h(X)`, refit iteratively.
    Optimal,
    /// Treat `mu_tilde` as the exact population mean.
    Population,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExternalSummary<T: Scalar> {
    pub mu_tilde: DVector<T>,
    pub n_external: usize,
    pub weight: WeightSpec<T>,
}

impl<T: Scalar> ExternalSummary<T> {
    pub fn new(mu_tilde: DVector<T>, n_external: usize, weight: WeightSpec<T>) -> Result<Self> {
        if mu_tilde.is_empty() {
            return Err(Error::invalid("mu_tilde is empty"));
        }
        if mu_tilde.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("mu_tilde has non-finite entries"));
        }
        if n_external == 0 && !matches!(weight, WeightSpec::Population) {
            return Err(Error::invalid("n_external must be at least 1"));
        }
        if let WeightSpec::Given(w) = &weight {
            check_spd(w, mu_tilde.len())?;
        }
        Ok(Self { mu_tilde, n_external, weight })
    }

    pub fn q(&self) -> usize {
        self.mu_tilde.len()
    }

    /// Same summary with a different weighting choice.
    pub fn with_weight(&self, weight: WeightSpec<T>) -> Result<Self> {
        Self::new(self.mu_tilde.clone(), self.n_external, weight)
    }
}

fn check_spd<T: Scalar>(w: &DMatrix<T>, q: usize) -> Result<()> {
    if w.nrows() != q || w.ncols() != q {
        return Err(Error::invalid(format!(
            "weight matrix is {}x{}, expected {q}x{q}",
            w.nrows(),
            w.ncols()
        )));
    }
    if w.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("weight matrix has non-finite entries"));
    }
    let scale = w.iter().fold(T::zero(), |m, v| if v.abs() > m { v.abs() } else { m });
    let tol = lit::<T>(1e-10) * (T::one() + scale);
    for i in 0..q {
        for j in 0..i {
            if (w[(i, j)] - w[(j, i)]).abs() > tol {
                return Err(Error::invalid("weight matrix is not symmetric"));
            }
        }
    }
    let eig = w.clone().symmetric_eigenvalues();
    let min = eig.iter().fold(T::max_value().unwrap_or(scale), |m, &v| if v < m { v } else { m });
    if min <= lit::<T>(1e-12) * (T::one() + scale) {
        return Err(Error::invalid("weight matrix is not positive definite"));
    }
    Ok(())
}
