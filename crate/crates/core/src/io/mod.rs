//! Data ingestion, run configuration, the split-sample analysis driver and
//! report emission.

pub mod analyze;
pub mod config;
pub mod dataset;
pub mod report;

pub use analyze::{analyze_real, AnalyzeReport, AnalyzeRow};
pub use config::{AnalyzeConfig, ConstraintConfig, DataConfig, ExternalConfig, Mode, RunConfig, SimulateConfig, WeightMode};
pub use dataset::{column_moments, load_dataset, read_dataset, read_header, ColumnRoles, Dataset, LoadOptions, Standardization};
pub use report::{read_report, write_report, FitContext, FitReport, MleSummary, ParamRow, Report, SolverSummary, CI_LEVEL};
