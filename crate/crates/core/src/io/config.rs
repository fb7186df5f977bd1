use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::dataset::{ColumnRoles, LoadOptions};
use crate::el::SolverConfig;
use crate::error::{Error, Result};
use crate::model::{ConstraintSpec, WeightSpec};
use crate::simulation::{Estimator, McConfig, Scheme};
use crate::External;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Fit,
    Simulate,
    Analyze,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub mode: Option<Mode>,
    pub seed: u64,
    /// Report path without extension; `.json` and `.txt` are appended.
    pub output: Option<PathBuf>,
    pub data: Option<DataConfig>,
    pub constraint: ConstraintConfig,
    pub external: Option<ExternalConfig>,
    pub solver: SolverConfig,
    pub simulate: SimulateConfig,
    pub analyze: AnalyzeConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            mode: None,
            seed: 1,
            output: None,
            data: None,
            constraint: ConstraintConfig::Identity,
            external: None,
            solver: SolverConfig::default(),
            simulate: SimulateConfig::default(),
            analyze: AnalyzeConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub path: PathBuf,
    pub outcome: String,
    pub covariates: Vec<String>,
    #[serde(default)]
    pub standardize: bool,
    #[serde(default = "default_delimiter")]
    pub delimiter: char,
}

fn default_delimiter() -> char {
    ','
}

impl DataConfig {
    pub fn roles(&self) -> ColumnRoles {
        ColumnRoles { outcome: self.outcome.clone(), covariates: self.covariates.clone() }
    }

    pub fn load_options(&self) -> Result<LoadOptions> {
        if !self.delimiter.is_ascii() {
            return Err(Error::Config(format!("data.delimiter must be ASCII, got {:?}", self.delimiter)));
        }
        Ok(LoadOptions { delimiter: self.delimiter as u8, standardize: self.standardize })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ConstraintConfig {
    Identity,
    Subset { indices: Vec<usize> },
    Affine { matrix: Vec<Vec<f64>>, offset: Option<Vec<f64>> },
}

impl ConstraintConfig {
    pub fn build(&self, p: usize) -> Result<ConstraintSpec<f64>> {
        let spec = match self {
            ConstraintConfig::Identity => ConstraintSpec::identity(p),
            ConstraintConfig::Subset { indices } => ConstraintSpec::subset(p, indices.clone()),
            ConstraintConfig::Affine { matrix, offset } => {
                let m = rows_to_matrix(matrix, "constraint.matrix")?;
                if m.ncols() != p {
                    return Err(Error::Config(format!(
                        "constraint.matrix has {} columns but there are {p} covariates",
                        m.ncols()
                    )));
                }
                let off = match offset {
                    Some(o) => DVector::from_column_slice(o),
                    None => DVector::zeros(m.nrows()),
                };
                ConstraintSpec::affine(m, off)
            }
        };
        spec.map_err(|e| Error::Config(format!("constraint: {e}")))
    }

    pub fn describe(&self) -> String {
        match self {
            ConstraintConfig::Identity => "identity".into(),
            ConstraintConfig::Subset { indices } => format!("subset {indices:?}"),
            ConstraintConfig::Affine { matrix, .. } => format!("affine ({} outputs)", matrix.len()),
        }
    }
}

fn rows_to_matrix(rows: &[Vec<f64>], field: &str) -> Result<DMatrix<f64>> {
    let r = rows.len();
    let c = rows.first().map_or(0, Vec::len);
    if r == 0 || c == 0 || rows.iter().any(|row| row.len() != c) {
        return Err(Error::Config(format!("{field} must be a non-empty rectangular array of rows")));
    }
    Ok(DMatrix::from_row_iterator(r, c, rows.iter().flatten().copied()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightMode {
    Given,
    Optimal,
    Population,
}

impl std::str::FromStr for WeightMode {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "given" => Ok(WeightMode::Given),
            "optimal" => Ok(WeightMode::Optimal),
            "population" => Ok(WeightMode::Population),
            other => Err(format!("unknown weight mode '{other}' (expected given, optimal or population)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExternalConfig {
    pub mu_tilde: Vec<f64>,
    pub n_external: usize,
    pub weight: WeightMode,
    /// Rows of `W`, required when `weight = "given"`.
    pub matrix: Option<Vec<Vec<f64>>>,
}

impl ExternalConfig {
    pub fn build(&self, q: usize) -> Result<External> {
        if self.mu_tilde.len() != q {
            return Err(Error::Config(format!(
                "external.mu_tilde has {} entries but the constraint has {q} outputs",
                self.mu_tilde.len()
            )));
        }
        let weight = match (self.weight, &self.matrix) {
            (WeightMode::Given, Some(rows)) => WeightSpec::Given(rows_to_matrix(rows, "external.matrix")?),
            (WeightMode::Given, None) => {
                return Err(Error::Config("external.matrix is required when external.weight = \"given\"".into()))
            }
            (WeightMode::Optimal, _) => WeightSpec::Optimal,
            (WeightMode::Population, _) => WeightSpec::Population,
        };
        External::new(DVector::from_column_slice(&self.mu_tilde), self.n_external, weight)
            .map_err(|e| Error::Config(format!("external: {e}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulateConfig {
    /// Name of a built-in scheme (`A1` ... `C2`).
    pub scheme: Option<String>,
    /// A user-defined scheme, used when `scheme` is absent.
    pub custom: Option<Scheme>,
    pub external_multiplier: Option<usize>,
    pub reps: usize,
    pub estimators: Vec<Estimator>,
    pub fixed_w: Option<Vec<f64>>,
}

impl Default for SimulateConfig {
    fn default() -> Self {
        let mc = McConfig::default();
        Self {
            scheme: None,
            custom: None,
            external_multiplier: None,
            reps: mc.reps,
            estimators: mc.estimators,
            fixed_w: None,
        }
    }
}

impl SimulateConfig {
    pub fn scheme(&self) -> Result<Scheme> {
        let base = match (&self.scheme, &self.custom) {
            (Some(name), _) => Scheme::by_name(name)
                .ok_or_else(|| Error::Config(format!("simulate.scheme: unknown scheme '{name}'")))?,
            (None, Some(s)) => s.clone(),
            (None, None) => return Err(Error::Config("simulate.scheme or simulate.custom is required".into())),
        };
        Ok(match self.external_multiplier {
            Some(m) => base.with_multiplier(m),
            None => base,
        })
    }

    pub fn mc_config(&self, seed: u64, solver: &SolverConfig) -> McConfig {
        McConfig {
            estimators: self.estimators.clone(),
            reps: self.reps,
            master_seed: seed,
            fixed_w: self.fixed_w.clone(),
            solver: solver.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnalyzeConfig {
    pub reps: usize,
    pub cases: usize,
    pub controls: usize,
}

impl Default for AnalyzeConfig {
    fn default() -> Self {
        Self { reps: 100, cases: 100, controls: 100 }
    }
}

impl RunConfig {
    pub fn from_toml_str(text: &str, origin: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(format!("{origin}: {e}")))?;
        cfg.solver.validate().map_err(|e| Error::Config(format!("{origin}: {e}")))?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: cannot read config: {e}", path.display())))?;
        Self::from_toml_str(&text, &path.display().to_string())
    }

    pub fn data(&self) -> Result<&DataConfig> {
        self.data.as_ref().ok_or_else(|| Error::Config("[data] section is required for this mode".into()))
    }

    pub fn external(&self) -> Result<&ExternalConfig> {
        self.external
            .as_ref()
            .ok_or_else(|| Error::Config("[external] section is required for this mode".into()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_full_example() {
        let text = r#"
mode = "fit"
seed = 7
output = "out/fit"

[data]
path = "d.csv"
outcome = "y"
covariates = ["a", "b"]
standardize = true

[constraint]
kind = "subset"
indices = [1]

[external]
mu_tilde = [0.2]
n_external = 500
weight = "given"
matrix = [[2.0]]

[solver]
outer_tol = 1e-9
"#;
        let cfg = RunConfig::from_toml_str(text, "x.toml").unwrap();
        assert_eq!(cfg.mode, Some(Mode::Fit));
        let spec = cfg.constraint.build(2).unwrap();
        assert_eq!(spec.q(), 1);
        let ext = cfg.external().unwrap().build(1).unwrap();
        assert_eq!(ext.n_external, 500);
        assert_eq!(cfg.solver.outer_tol, 1e-9);
        assert_eq!(cfg.solver.inner_tol, 1e-10);
    }

    #[test]
    fn unknown_field_names_field_and_location() {
        let err = RunConfig::from_toml_str("seed = 1\n[solver]\ninner_tolerance = 3\n", "bad.toml").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("bad.toml") && msg.contains("inner_tolerance") && msg.contains("line 3"), "{msg}");
    }

    #[test]
    fn invalid_tolerance_names_field() {
        let err = RunConfig::from_toml_str("[solver]\ninner_tol = -1.0\n", "c.toml").unwrap_err();
        assert!(err.to_string().contains("solver.inner_tol"));
    }

    #[test]
    fn mu_tilde_dimension_is_checked() {
        let ext = ExternalConfig { mu_tilde: vec![0.0], n_external: 10, weight: WeightMode::Optimal, matrix: None };
        assert!(ext.build(2).unwrap_err().to_string().contains("external.mu_tilde"));
    }
}
