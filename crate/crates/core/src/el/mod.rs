//! Maximum empirical likelihood estimation.

pub mod dual;
mod fit;
mod profile;

use serde::{Deserialize, Serialize};

pub use dual::{solve_dual, LagrangeState};
pub use fit::{
    fit_known_mu, fit_mele, fit_mele_from, init_theta, solve_nu, profile_objective, profile_gradient,
    profile_hessian, Diagnostics, FitResult, FitWeighting, InitEstimates,
};

/// Tolerances and iteration limits for the inner and outer solves.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverConfig {
    /// Bound on `max_k |sum_i p_i H_ik|` at an accepted inner solve.
    pub inner_tol: f64,
    /// Bound on the sup norm of the profiled gradient divided by `n`.
    pub outer_tol: f64,
    pub max_inner_iters: usize,
    pub max_outer_iters: usize,
    /// Step for finite difference gradient checks.
    pub fd_step: f64,
    pub ls_shrink: f64,
    pub ls_sufficient_decrease: f64,
    /// `|gamma|` is kept at or below this value.
    pub gamma_bound: f64,
    /// Compare the analytic gradient against central differences at exit and
    /// record the discrepancy in the diagnostics.
    pub check_gradient: bool,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            inner_tol: 1e-10,
            outer_tol: 1e-8,
            max_inner_iters: 100,
            max_outer_iters: 500,
            fd_step: 1e-6,
            ls_shrink: 0.5,
            ls_sufficient_decrease: 1e-4,
            gamma_bound: 15.0,
            check_gradient: false,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> crate::Result<()> {
        let positive = [
            ("inner_tol", self.inner_tol),
            ("outer_tol", self.outer_tol),
            ("fd_step", self.fd_step),
            ("ls_sufficient_decrease", self.ls_sufficient_decrease),
            ("gamma_bound", self.gamma_bound),
        ];
        for (name, v) in positive {
            if v <= 0.0 || !v.is_finite() {
                return Err(crate::Error::Config(format!("solver.{name} must be positive, got {v}")));
            }
        }
        if !(self.ls_shrink > 0.0 && self.ls_shrink < 1.0) {
            return Err(crate::Error::Config(format!(
                "solver.ls_shrink must lie in (0, 1), got {}",
                self.ls_shrink
            )));
        }
        if self.max_inner_iters == 0 || self.max_outer_iters == 0 {
            return Err(crate::Error::Config("solver iteration limits must be positive".into()));
        }
        Ok(())
    }
}
