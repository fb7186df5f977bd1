use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::Sample;

/// Row-level problems reported before giving up.
const MAX_REPORTED: usize = 10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ColumnRoles {
    pub outcome: String,
    pub covariates: Vec<String>,
}

/// Column means and sample standard deviations used for z-scoring.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardization {
    pub means: Vec<f64>,
    pub sds: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub sample: Sample,
    pub covariate_names: Vec<String>,
    pub standardization: Option<Standardization>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LoadOptions {
    pub delimiter: u8,
    pub standardize: bool,
}

impl Default for LoadOptions {
    fn default() -> Self {
        Self { delimiter: b',', standardize: false }
    }
}

fn is_missing(field: &str) -> bool {
    matches!(field.trim(), "" | "NA" | "NaN" | "nan" | "null" | ".")
}

/// Reads a delimited file with a header row. The outcome column must hold
/// only 0 and 1; covariates must be present and finite on every row.
pub fn load_dataset(path: &Path, roles: &ColumnRoles, opts: LoadOptions) -> Result<Dataset> {
    let file = std::fs::File::open(path)
        .map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))?;
    read_dataset(file, &path.display().to_string(), roles, opts)
}

/// [`load_dataset`] from any reader; `origin` labels error messages.
pub fn read_dataset<R: std::io::Read>(reader: R, origin: &str, roles: &ColumnRoles, opts: LoadOptions) -> Result<Dataset> {
    if roles.covariates.is_empty() {
        return Err(Error::Config("data.covariates is empty".into()));
    }
    let mut rdr = csv::ReaderBuilder::new().delimiter(opts.delimiter).trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers()?.clone();
    let find = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Schema(format!("{origin}: column '{name}' not found in header")))
    };
    let y_col = find(&roles.outcome)?;
    let x_cols: Vec<usize> = roles.covariates.iter().map(|c| find(c)).collect::<Result<_>>()?;
    let p = x_cols.len();

    let mut outcomes = Vec::new();
    let mut values = Vec::new();
    let mut problems = Vec::new();
    for (k, rec) in rdr.records().enumerate() {
        let rec = rec?;
        // header is line 1
        let line = k + 2;
        let y = rec.get(y_col).unwrap_or("");
        match y.trim() {
            "0" => outcomes.push(0u8),
            "1" => outcomes.push(1u8),
            other if is_missing(other) => {
                problems.push(format!("line {line}: missing value in '{}'", roles.outcome));
                outcomes.push(0);
            }
            other => {
                return Err(Error::Schema(format!(
                    "{origin}: line {line}: outcome '{}' must be 0 or 1, found '{other}'",
                    roles.outcome
                )))
            }
        }
        for (name, &c) in roles.covariates.iter().zip(&x_cols) {
            let field = rec.get(c).unwrap_or("");
            if is_missing(field) {
                problems.push(format!("line {line}: missing value in '{name}'"));
                values.push(0.0);
                continue;
            }
            match field.trim().parse::<f64>() {
                Ok(v) if v.is_finite() => values.push(v),
                _ => {
                    problems.push(format!("line {line}: '{name}' is not a finite number ('{field}')"));
                    values.push(0.0);
                }
            }
        }
    }
    if !problems.is_empty() {
        let total = problems.len();
        let shown: Vec<String> = problems.into_iter().take(MAX_REPORTED).collect();
        return Err(Error::Schema(format!(
            "{origin}: {total} bad cell(s): {}{}",
            shown.join("; "),
            if total > MAX_REPORTED { "; ..." } else { "" }
        )));
    }
    let n = outcomes.len();
    if n == 0 {
        return Err(Error::Schema(format!("{origin}: no data rows")));
    }
    let mut x = DMatrix::from_row_slice(n, p, &values);
    let standardization = if opts.standardize {
        let st = column_moments(&x);
        for j in 0..p {
            if st.sds[j] <= 0.0 {
                return Err(Error::Schema(format!(
                    "{origin}: column '{}' is constant and cannot be standardized",
                    roles.covariates[j]
                )));
            }
            for i in 0..n {
                x[(i, j)] = (x[(i, j)] - st.means[j]) / st.sds[j];
            }
        }
        Some(st)
    } else {
        None
    };
    Ok(Dataset {
        sample: Sample::new(outcomes, x)?,
        covariate_names: roles.covariates.clone(),
        standardization,
    })
}

/// Column names from the header row.
pub fn read_header(path: &Path, delimiter: u8) -> Result<Vec<String>> {
    let file = std::fs::File::open(path)
        .map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))?;
    let mut rdr = csv::ReaderBuilder::new().delimiter(delimiter).trim(csv::Trim::All).from_reader(file);
    Ok(rdr.headers()?.iter().map(str::to_string).collect())
}

/// Means and `n - 1` standard deviations of each column.
pub fn column_moments(x: &DMatrix<f64>) -> Standardization {
    let n = x.nrows() as f64;
    let mut means = Vec::with_capacity(x.ncols());
    let mut sds = Vec::with_capacity(x.ncols());
    for col in x.column_iter() {
        let m = col.sum() / n;
        let ss: f64 = col.iter().map(|v| (v - m) * (v - m)).sum();
        means.push(m);
        sds.push(if n > 1.0 { (ss / (n - 1.0)).sqrt() } else { 0.0 });
    }
    Standardization { means, sds }
}
