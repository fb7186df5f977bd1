//! `ccel`: fit, simulate and analyze from the command line.
//!
//! Every subcommand reads an optional TOML run configuration, lets flags
//! override it, and writes `<output>.json` plus `<output>.txt`.

use std::path::PathBuf;
use std::process::ExitCode;

use ccel::baselines::fit_prospective_mle;
use ccel::inference::fit_external;
use ccel::io::{
    analyze_real, load_dataset, read_header, write_report, ConstraintConfig, DataConfig, ExternalConfig, FitContext,
    FitReport, Report, RunConfig, WeightMode,
};
use ccel::simulation::{run_monte_carlo, Estimator};
use ccel::{Category, Error, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(name = "ccel", version, about = "Case-control logistic regression with external covariate summaries")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML run configuration; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Report path without extension.
    #[arg(long)]
    output: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Print nothing to stdout.
    #[arg(long)]
    quiet: bool,
}

#[derive(Args)]
struct DataArgs {
    /// Delimited file with a header row.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Outcome column (0/1).
    #[arg(long)]
    outcome: Option<String>,
    /// Covariate columns; defaults to every column except the outcome.
    #[arg(long, value_delimiter = ',')]
    covariates: Option<Vec<String>>,
    /// Z-score covariates with full-data moments.
    #[arg(long)]
    standardize: bool,
    /// Only the listed covariates (0-based) carry external means.
    #[arg(long, value_delimiter = ',')]
    subset: Option<Vec<usize>>,
}

#[derive(Subcommand)]
enum Command {
    /// Fit one case-control sample with an external summary.
    Fit {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArgs,
        /// External means of the constrained covariates.
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
        mu_tilde: Option<Vec<f64>>,
        #[arg(long)]
        n_external: Option<usize>,
        #[arg(long)]
        weight: Option<WeightMode>,
        /// Weighting matrix in row-major order, for `--weight given`.
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
        w: Option<Vec<f64>>,
    },
    /// Monte Carlo study on a built-in or configured scheme.
    Simulate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        scheme: Option<String>,
        #[arg(long)]
        reps: Option<usize>,
        /// External sample size as a multiple of the internal one.
        #[arg(long)]
        multiplier: Option<usize>,
        #[arg(long, value_delimiter = ',')]
        estimators: Option<Vec<Estimator>>,
    },
    /// Split-sample replication study on a cohort file.
    Analyze {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArgs,
        /// `pima` selects Outcome ~ Glucose + Pregnancies + BMI, standardized,
        /// with 100 replications of 100 cases and 100 controls.
        #[arg(long)]
        protocol: Option<Protocol>,
        #[arg(long)]
        reps: Option<usize>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Protocol {
    Pima,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Err(e) = init_threads() {
        return fail(&e);
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => fail(&e),
    }
}

fn fail(e: &Error) -> ExitCode {
    let (label, code) = match e.category() {
        Category::Input => ("input", 2),
        Category::Numerical => ("numerical", 3),
        Category::Io => ("io", 1),
    };
    eprintln!("error [{label}]: {e}");
    ExitCode::from(code)
}

/// `CCEL_THREADS` caps the worker pool; results do not depend on it.
fn init_threads() -> Result<()> {
    let Ok(v) = std::env::var("CCEL_THREADS") else { return Ok(()) };
    let n: usize = v
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::Config(format!("CCEL_THREADS must be a positive integer, got '{v}'")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::Config(format!("cannot start thread pool: {e}")))
}

fn load_config(common: &Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(o) = &common.output {
        cfg.output = Some(o.clone());
    }
    Ok(cfg)
}

fn apply_data_args(cfg: &mut RunConfig, args: &DataArgs) -> Result<()> {
    if let Some(path) = &args.data {
        let outcome = args
            .outcome
            .clone()
            .or_else(|| cfg.data.as_ref().map(|d| d.outcome.clone()))
            .unwrap_or_else(|| "y".into());
        let base = cfg.data.take();
        cfg.data = Some(DataConfig {
            path: path.clone(),
            outcome,
            covariates: base.as_ref().map(|d| d.covariates.clone()).unwrap_or_default(),
            standardize: base.as_ref().is_some_and(|d| d.standardize),
            delimiter: base.as_ref().map_or(',', |d| d.delimiter),
        });
    }
    let Some(data) = cfg.data.as_mut() else { return Ok(()) };
    if let Some(o) = &args.outcome {
        data.outcome = o.clone();
    }
    if let Some(c) = &args.covariates {
        data.covariates = c.clone();
    }
    if args.standardize {
        data.standardize = true;
    }
    if data.covariates.is_empty() {
        let header = read_header(&data.path, data.load_options()?.delimiter)?;
        data.covariates = header.into_iter().filter(|h| *h != data.outcome).collect();
    }
    if let Some(idx) = &args.subset {
        cfg.constraint = ConstraintConfig::Subset { indices: idx.clone() };
    }
    Ok(())
}

fn output_base(cfg: &RunConfig, default: &str) -> PathBuf {
    cfg.output.clone().unwrap_or_else(|| PathBuf::from(default))
}

fn emit(report: &Report, cfg: &RunConfig, default: &str, quiet: bool) -> Result<()> {
    let base = output_base(cfg, default);
    let (json, txt) = write_report(report, &base)?;
    if !quiet {
        print!("{}", report.render_text());
        eprintln!("wrote {} and {}", json.display(), txt.display());
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Fit { common, data, mu_tilde, n_external, weight, w } => {
            let mut cfg = load_config(&common)?;
            apply_data_args(&mut cfg, &data)?;
            let dcfg = cfg.data()?.clone();
            let ds = load_dataset(&dcfg.path, &dcfg.roles(), dcfg.load_options()?)?;
            let p = ds.sample.p();
            let spec = cfg.constraint.build(p)?;
            let mut ext_cfg = cfg.external.clone().unwrap_or(ExternalConfig {
                mu_tilde: Vec::new(),
                n_external: 0,
                weight: WeightMode::Optimal,
                matrix: None,
            });
            if let Some(m) = mu_tilde {
                ext_cfg.mu_tilde = m;
            }
            if let Some(nx) = n_external {
                ext_cfg.n_external = nx;
            }
            if let Some(wm) = weight {
                ext_cfg.weight = wm;
            }
            if let Some(v) = w {
                let q = ext_cfg.mu_tilde.len();
                if q == 0 || v.len() != q * q {
                    return Err(Error::Config(format!("--w needs {} entries, got {}", q * q, v.len())));
                }
                ext_cfg.matrix = Some(v.chunks(q).map(<[f64]>::to_vec).collect());
            }
            if ext_cfg.mu_tilde.is_empty() {
                return Err(Error::Config("external means are required (--mu-tilde or [external])".into()));
            }
            let external = ext_cfg.build(spec.q())?;
            let ef = fit_external(&ds.sample, &external, &spec, &cfg.solver)?;
            let mle = fit_prospective_mle(&ds.sample, &cfg.solver).ok();
            let weighting = match ext_cfg.weight {
                WeightMode::Given => "given",
                WeightMode::Optimal => "optimal",
                WeightMode::Population => "population",
            };
            let ctx = FitContext {
                data: Some(dcfg.path.display().to_string()),
                covariates: &ds.covariate_names,
                standardization: ds.standardization.clone(),
                constraint: cfg.constraint.describe(),
                n_external: ext_cfg.n_external,
                weighting,
                solver: &cfg.solver,
            };
            let report = Report::Fit(FitReport::new(ctx, &ds.sample, &ef, mle.as_ref()));
            emit(&report, &cfg, "ccel-fit", common.quiet)
        }
        Command::Simulate { common, scheme, reps, multiplier, estimators } => {
            let mut cfg = load_config(&common)?;
            let sim = &mut cfg.simulate;
            if let Some(s) = scheme {
                sim.scheme = Some(s);
            }
            if let Some(r) = reps {
                sim.reps = r;
            }
            if let Some(m) = multiplier {
                sim.external_multiplier = Some(m);
            }
            if let Some(e) = estimators {
                sim.estimators = e;
            }
            let scheme = cfg.simulate.scheme()?;
            let mc = cfg.simulate.mc_config(cfg.seed, &cfg.solver);
            let report = Report::Simulate(run_monte_carlo(&scheme, &mc)?);
            emit(&report, &cfg, "ccel-simulate", common.quiet)
        }
        Command::Analyze { common, mut data, protocol, reps } => {
            let mut cfg = load_config(&common)?;
            if let Some(Protocol::Pima) = protocol {
                data.outcome.get_or_insert_with(|| "Outcome".into());
                data.covariates
                    .get_or_insert_with(|| vec!["Glucose".into(), "Pregnancies".into(), "BMI".into()]);
                data.standardize = true;
                cfg.analyze = Default::default();
            }
            apply_data_args(&mut cfg, &data)?;
            if let Some(r) = reps {
                cfg.analyze.reps = r;
            }
            let dcfg = cfg.data()?.clone();
            let ds = load_dataset(&dcfg.path, &dcfg.roles(), dcfg.load_options()?)?;
            let spec = cfg.constraint.build(ds.sample.p())?;
            let report = analyze_real(
                &ds,
                &dcfg.path.display().to_string(),
                &spec,
                &cfg.constraint.describe(),
                &cfg.analyze,
                cfg.seed,
                &cfg.solver,
            )?;
            emit(&Report::Analyze(report), &cfg, "ccel-analyze", common.quiet)
        }
    }
}
