use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn ccel(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ccel"))
        .args(args)
        .current_dir(dir)
        .env("CCEL_THREADS", "2")
        .output()
        .unwrap()
}

fn standin() -> String {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("../../data/pima_standin.csv")
        .display()
        .to_string()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn fit_writes_both_reports() {
    let dir = tempfile::tempdir().unwrap();
    let data = standin();
    let out = ccel(
        &[
            "fit", "--data", &data, "--outcome", "Outcome", "--covariates", "Glucose,BMI", "--standardize",
            "--mu-tilde", "0.0,0.0", "--n-external", "376", "--weight", "optimal", "--output", "run/fit",
        ],
        dir.path(),
    );
    assert!(out.status.success(), "{}", stderr(&out));
    let report = json(&dir.path().join("run/fit.json"));
    assert_eq!(report["kind"], "fit");
    assert_eq!(report["params"][0]["name"], "alpha");
    let text = std::fs::read_to_string(dir.path().join("run/fit.txt")).unwrap();
    assert_eq!(text, String::from_utf8(out.stdout).unwrap());
}

#[test]
fn fit_with_given_matrix_and_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = format!(
        r#"
[data]
path = "{}"
outcome = "Outcome"
covariates = ["Glucose", "Pregnancies", "BMI"]
standardize = true

[constraint]
kind = "subset"
indices = [0]

[external]
mu_tilde = [0.0]
n_external = 376
weight = "given"
matrix = [[1.0]]
"#,
        standin().replace('\\', "/")
    );
    std::fs::write(dir.path().join("run.toml"), cfg).unwrap();
    let out = ccel(&["fit", "--config", "run.toml", "--quiet", "--output", "given"], dir.path());
    assert!(out.status.success(), "{}", stderr(&out));
    assert!(out.stdout.is_empty());
    let report = json(&dir.path().join("given.json"));
    assert_eq!(report["covariance_form"], "general_w");
    assert_eq!(report["mu_tilde"].as_array().unwrap().len(), 1);
}

#[test]
fn simulate_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let args = ["simulate", "--scheme", "C2", "--reps", "3", "--estimators", "mle,optimal_v", "--seed", "5", "--quiet"];
    let a = ccel(&[&args[..], &["--output", "a"]].concat(), dir.path());
    let b = ccel(&[&args[..], &["--output", "b"]].concat(), dir.path());
    assert!(a.status.success() && b.status.success(), "{}", stderr(&a));
    let ja = std::fs::read(dir.path().join("a.json")).unwrap();
    assert_eq!(ja, std::fs::read(dir.path().join("b.json")).unwrap());
    assert_eq!(json(&dir.path().join("a.json"))["kind"], "simulate");
}

#[test]
fn analyze_pima_protocol() {
    let dir = tempfile::tempdir().unwrap();
    let data = standin();
    let out = ccel(&["analyze", "--data", &data, "--protocol", "pima", "--reps", "2", "--output", "an"], dir.path());
    assert!(out.status.success(), "{}", stderr(&out));
    let report = json(&dir.path().join("an.json"));
    assert_eq!(report["kind"], "analyze");
    assert_eq!(report["rows"].as_array().unwrap().len(), 3);
    assert_eq!(report["covariates"][0], "Glucose");
}

#[test]
fn input_problems_exit_with_status_two() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("bad.toml"), "seeed = 3\n").unwrap();
    let out = ccel(&["simulate", "--config", "bad.toml"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).starts_with("error [input]"), "{}", stderr(&out));

    std::fs::write(dir.path().join("missing.csv"), "y,a\n1,0.5\n0,\n1,0.2\n0,0.9\n").unwrap();
    let out = ccel(&["fit", "--data", "missing.csv", "--mu-tilde", "0.3"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("line 3"), "{}", stderr(&out));

    let out = ccel(&["simulate", "--scheme", "Z9"], dir.path());
    assert_eq!(out.status.code(), Some(2));

    let out = ccel(&["fit", "--data", "nowhere.csv", "--mu-tilde", "0.3"], dir.path());
    assert_eq!(out.status.code(), Some(1));
}
