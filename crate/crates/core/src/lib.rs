//! Logistic regression on case-control data combined with external summary
//! information about the covariate distribution, fitted by empirical
//! likelihood.
//!
//! The model layer in [`model`] is generic over the floating point type. The
//! solvers and everything above them work in `f64`; the aliases below name
//! those concrete types.

pub mod baselines;
pub mod el;
pub mod error;
pub mod inference;
pub mod io;
pub mod linalg;
pub mod model;
mod serde_nan;
pub mod simulation;

pub use error::{Category, Error, Result};
pub use model::{
    case_proportion, eval_h, logistic_prob, tilt, CaseControlSample, ConstraintSpec, ExternalSummary, HMap,
    HValue, Scalar, ThetaFull, Tilt, WeightSpec,
};

pub type Theta = ThetaFull<f64>;
pub type Sample = CaseControlSample<f64>;
pub type External = ExternalSummary<f64>;
pub type Constraint = ConstraintSpec<f64>;
pub type Weight = WeightSpec<f64>;
