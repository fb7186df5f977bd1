//! Inner Lagrange dual: for fixed `theta`, find `nu` with
//! `sum_i H_i / (1 + nu'H_i) = 0`.
//!
//! The root is the minimizer of the convex function
//! `D(nu) = -sum_i log*(1 + nu'H_i)`, where `log*` is the logarithm continued
//! by its second order Taylor expansion below `1/n`. That extension keeps `D`
//! finite everywhere so damped Newton converges from any start.

use nalgebra::{DMatrix, DVector};

use super::SolverConfig;
use crate::error::{Error, Result};
use crate::linalg::psd_solve;

/// `1 + nu'H_i` beyond this means the multipliers are running off to infinity.
const MAX_Z: f64 = 1e10;

/// Allowed gap between the total EL mass and one.
const MASS_TOL: f64 = 1e-8;

/// `nu` together with the EL weights it induces.
#[derive(Debug, Clone, PartialEq)]
pub struct LagrangeState {
    pub nu: DVector<f64>,
    /// `p_i = 1 / (n (1 + nu'H_i))`
    pub weights: Vec<f64>,
    /// Multiplier of `sum p_i = 1`; always 1 at a stationary point.
    pub lambda: f64,
    pub iterations: usize,
    /// `max_k |sum_i p_i H_ik|`
    pub residual: f64,
}

/// `log*(z)` and its first two derivatives.
#[inline]
fn log_star(z: f64, eps: f64) -> (f64, f64, f64) {
    if z >= eps {
        (z.ln(), 1.0 / z, -1.0 / (z * z))
    } else {
        let r = z / eps;
        (eps.ln() - 1.5 + 2.0 * r - 0.5 * r * r, (2.0 - r) / eps, -1.0 / (eps * eps))
    }
}

struct DualEval {
    value: f64,
    grad: DVector<f64>,
    hess: DMatrix<f64>,
    min_z: f64,
    max_z: f64,
}

fn dual_value(h: &DMatrix<f64>, nu: &DVector<f64>, eps: f64) -> f64 {
    let mut value = 0.0;
    for i in 0..h.nrows() {
        let z = 1.0 + h.row(i).transpose().dot(nu);
        value -= log_star(z, eps).0;
    }
    value
}

fn dual_eval(h: &DMatrix<f64>, nu: &DVector<f64>, eps: f64) -> DualEval {
    let (n, r) = h.shape();
    let mut value = 0.0;
    let mut grad = DVector::zeros(r);
    let mut hess = DMatrix::zeros(r, r);
    let mut min_z = f64::INFINITY;
    let mut max_z = f64::NEG_INFINITY;
    let mut row = vec![0.0; r];
    for i in 0..n {
        let mut z = 1.0;
        for k in 0..r {
            row[k] = h[(i, k)];
            z += nu[k] * row[k];
        }
        min_z = min_z.min(z);
        max_z = max_z.max(z);
        let (l, d1, d2) = log_star(z, eps);
        value -= l;
        for a in 0..r {
            grad[a] -= d1 * row[a];
            for b in 0..=a {
                hess[(a, b)] -= d2 * row[a] * row[b];
            }
        }
    }
    for a in 0..r {
        for b in 0..a {
            hess[(b, a)] = hess[(a, b)];
        }
    }
    DualEval { value, grad, hess, min_z, max_z }
}

fn sign_infeasibility(h: &DMatrix<f64>) -> Option<usize> {
    (0..h.ncols()).find(|&k| {
        let col = h.column(k);
        let pos = col.iter().any(|&v| v > 0.0);
        let neg = col.iter().any(|&v| v < 0.0);
        pos != neg
    })
}

/// Solves the dual for the `n x (1+q)` matrix of constraint values `h`,
/// starting from `start`.
pub fn solve_dual(h: &DMatrix<f64>, start: &DVector<f64>, cfg: &SolverConfig) -> Result<LagrangeState> {
    let (n, r) = h.shape();
    if n == 0 {
        return Err(Error::invalid("empty sample"));
    }
    if start.len() != r {
        return Err(Error::invalid(format!("multiplier start has length {}, expected {r}", start.len())));
    }
    if h.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("non-finite constraint values"));
    }
    if let Some(k) = sign_infeasibility(h) {
        return Err(Error::ConstraintInfeasible { constraint: k });
    }
    let eps = 1.0 / n as f64;
    let mut nu = start.clone();
    // a warm start from a neighbouring theta can land deep in the quadratic
    // region; fall back to zero when it does
    if dual_eval(h, &nu, eps).min_z < eps {
        nu = DVector::zeros(r);
    }

    let mut iterations = 0;
    loop {
        let ev = dual_eval(h, &nu, eps);
        let residual = ev.grad.amax() / n as f64;
        if ev.max_z > MAX_Z || !ev.value.is_finite() {
            return Err(Error::ConstraintInfeasible { constraint: dominant(&nu, h) });
        }
        if residual <= cfg.inner_tol && ev.min_z >= eps {
            let (nu, _) = polish(h, nu.clone(), residual, eps);
            let st = finish(h, nu.clone(), iterations);
            // sum p_i = 1 holds exactly at a root; a diverging nu can push the
            // residual to zero without it
            if (st.weights.iter().sum::<f64>() - 1.0).abs() <= MASS_TOL {
                return Ok(st);
            }
        }
        if iterations >= cfg.max_inner_iters {
            if ev.min_z < eps || ev.max_z > MAX_Z.sqrt() {
                return Err(Error::ConstraintInfeasible { constraint: dominant(&nu, h) });
            }
            return Err(Error::InnerNonConvergence { iterations, residual });
        }
        iterations += 1;

        let step = -psd_solve(&ev.hess, &ev.grad, 1e-14);
        let slope = ev.grad.dot(&step);
        let mut t = 1.0;
        let mut accepted = false;
        if -slope <= 1e-11 * (1.0 + ev.value.abs()) {
            // the predicted decrease is below rounding in D; inside the
            // quadratic region the full Newton step is safe
            let cand = &nu + &step;
            if dual_eval(h, &cand, eps).min_z >= eps {
                nu = cand;
                continue;
            }
        }
        for _ in 0..60 {
            let cand = &nu + &step * t;
            let v = dual_value(h, &cand, eps);
            if v.is_finite() && v <= ev.value + 1e-4 * t * slope {
                nu = cand;
                accepted = true;
                break;
            }
            t *= 0.5;
        }
        if !accepted {
            // no further decrease available at machine precision
            if ev.min_z >= eps && residual <= cfg.inner_tol.sqrt() * 1e-2 {
                let st = finish(h, nu.clone(), iterations);
                if (st.weights.iter().sum::<f64>() - 1.0).abs() <= MASS_TOL {
                    return Ok(st);
                }
                return Err(Error::ConstraintInfeasible { constraint: dominant(&nu, h) });
            }
            if ev.min_z < eps {
                return Err(Error::ConstraintInfeasible { constraint: dominant(&nu, h) });
            }
            return Err(Error::InnerNonConvergence { iterations, residual });
        }
    }
}

/// Up to two extra Newton steps once the tolerance is met, kept only while
/// they shrink the residual. The outer gradient inherits the error in `nu`
/// amplified by the spread of the tilts, so the extra digits are worth it.
fn polish(h: &DMatrix<f64>, mut nu: DVector<f64>, mut residual: f64, eps: f64) -> (DVector<f64>, f64) {
    let n = h.nrows() as f64;
    for _ in 0..2 {
        let ev = dual_eval(h, &nu, eps);
        let cand = &nu - psd_solve(&ev.hess, &ev.grad, 1e-14);
        let cev = dual_eval(h, &cand, eps);
        let r = cev.grad.amax() / n;
        if cev.min_z >= eps && r < residual {
            nu = cand;
            residual = r;
        } else {
            break;
        }
    }
    (nu, residual)
}

fn dominant(nu: &DVector<f64>, h: &DMatrix<f64>) -> usize {
    (0..nu.len())
        .map(|k| (k, nu[k].abs() * h.column(k).amax()))
        .max_by(|a, b| a.1.total_cmp(&b.1))
        .map(|(k, _)| k)
        .unwrap_or(0)
}

fn finish(h: &DMatrix<f64>, nu: DVector<f64>, iterations: usize) -> LagrangeState {
    let n = h.nrows();
    let weights: Vec<f64> = (0..n)
        .map(|i| 1.0 / (n as f64 * (1.0 + h.row(i).transpose().dot(&nu))))
        .collect();
    let residual = (0..h.ncols())
        .map(|k| (0..n).map(|i| weights[i] * h[(i, k)]).sum::<f64>().abs())
        .fold(0.0, f64::max);
    LagrangeState { nu, weights, lambda: 1.0, iterations, residual }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn cfg() -> SolverConfig {
        SolverConfig::default()
    }

    #[test]
    fn two_point_closed_form() {
        let h = DMatrix::from_column_slice(2, 1, &[1.0, -0.5]);
        let st = solve_dual(&h, &DVector::from_element(1, 0.0), &cfg()).unwrap();
        // nu = -(H1 + H2) / (2 H1 H2)
        let closed = -(1.0 - 0.5) / (2.0 * 1.0 * -0.5);
        assert_relative_eq!(st.nu[0], closed, epsilon = 1e-10);
        assert_relative_eq!(st.weights[0], 1.0 / 3.0, epsilon = 1e-10);
        assert_relative_eq!(st.weights[1], 2.0 / 3.0, epsilon = 1e-10);
        assert!(st.residual < 1e-12);
        assert_eq!(st.lambda, 1.0);
    }

    #[test]
    fn balanced_moments_give_zero_multiplier() {
        let h = DMatrix::from_row_slice(4, 2, &[1.0, 0.5, -1.0, -0.5, 0.5, -1.0, -0.5, 1.0]);
        let st = solve_dual(&h, &DVector::from_column_slice(&[0.3, -0.2]), &cfg()).unwrap();
        assert!(st.nu.amax() < 1e-10);
        for w in &st.weights {
            assert_relative_eq!(*w, 0.25, epsilon = 1e-10);
        }
    }

    #[test]
    fn all_positive_component_is_infeasible() {
        let h = DMatrix::from_row_slice(3, 2, &[0.5, 1.0, 2.0, -1.0, 0.1, 0.3]);
        assert!(matches!(
            solve_dual(&h, &DVector::zeros(2), &cfg()),
            Err(Error::ConstraintInfeasible { constraint: 0 })
        ));
    }

    #[test]
    fn joint_infeasibility_is_detected() {
        // each column changes sign, but (1,1) . H_i > 0 for every row
        let h = DMatrix::from_row_slice(3, 2, &[2.0, -1.0, -1.0, 2.0, 1.0, 1.0]);
        assert!(matches!(
            solve_dual(&h, &DVector::zeros(2), &cfg()),
            Err(Error::ConstraintInfeasible { .. })
        ));
    }

    #[test]
    fn degenerate_zero_column_keeps_weights() {
        let h = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 0.0, -0.5]);
        let st = solve_dual(&h, &DVector::from_column_slice(&[0.4, 0.0]), &cfg()).unwrap();
        assert_relative_eq!(st.weights[0], 1.0 / 3.0, epsilon = 1e-10);
        assert_relative_eq!(st.weights[1], 2.0 / 3.0, epsilon = 1e-10);
    }

    #[test]
    fn log_star_is_c2_at_threshold() {
        let eps = 0.1;
        let below = log_star(eps * (1.0 - 1e-12), eps);
        let above = log_star(eps, eps);
        assert_relative_eq!(below.0, above.0, epsilon = 1e-10);
        assert_relative_eq!(below.1, above.1, max_relative = 1e-9);
        assert_relative_eq!(below.2, above.2, max_relative = 1e-9);
    }
}
