//! End-to-end runs of the `baryflow` binary on small configs.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn baryflow(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_baryflow")).args(args).output().unwrap()
}

fn config(dir: &Path, body: &str) -> PathBuf {
    let path = dir.join("run.toml");
    std::fs::write(&path, body).unwrap();
    path
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn rows(path: &Path) -> Vec<Vec<String>> {
    std::fs::read_to_string(path).unwrap().lines().map(|l| l.split(',').map(String::from).collect()).collect()
}

const MINIMAL: &str = "output_dir = \"out\"\n\
    [[inputs]]\nkind = \"gaussian\"\nmean = [0.0]\ncov = [[1.0]]\n\
    [[inputs]]\nkind = \"gaussian\"\nmean = [4.0]\ncov = [[1.0]]\n\
    [empirical]\nn_particles = 64\nbatch_size = 64\nn_iter = 40\n";

#[test]
fn minimal_barycenter_writes_three_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let out = baryflow(&["barycenter", config(dir.path(), MINIMAL).to_str().unwrap()]);
    assert!(out.status.success(), "{}", stderr(&out));
    let mut names: Vec<String> = std::fs::read_dir(dir.path().join("out"))
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    names.sort();
    assert_eq!(names, ["barycenter.csv", "report.json", "trace.csv"]);

    let table = rows(&dir.path().join("out/barycenter.csv"));
    assert_eq!(table[0], ["f0"]);
    assert_eq!(table.len(), 65);
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("out/report.json")).unwrap()).unwrap();
    assert_eq!(report["command"], "barycenter");
    assert!(report["git_describe"].is_string());
}

#[test]
fn unknown_key_is_a_config_error_naming_the_key() {
    let dir = tempfile::tempdir().unwrap();
    let body = MINIMAL.replace("n_iter = 40", "n_iters = 40");
    let out = baryflow(&["barycenter", config(dir.path(), &body).to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    let err = stderr(&out);
    assert!(err.starts_with("error[config]"), "{err}");
    assert!(err.contains("n_iters"), "{err}");
}

#[test]
fn missing_target_file_exits_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let body = "output_dir = \"out\"\n[data]\nsources = [\"a.csv\", \"b.csv\"]\ntarget = \"missing.csv\"\n";
    let out = baryflow(&["msda", config(dir.path(), body).to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("missing.csv"), "{}", stderr(&out));
}

#[test]
fn zero_threads_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let out = baryflow(&["--threads", "0", "barycenter", config(dir.path(), MINIMAL).to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn validate_checks_without_running() {
    let dir = tempfile::tempdir().unwrap();
    let path = config(dir.path(), MINIMAL);
    let out = baryflow(&["validate", "barycenter", path.to_str().unwrap()]);
    assert!(out.status.success(), "{}", stderr(&out));
    assert!(!dir.path().join("out").exists());
}

#[test]
fn toy_gaussian_flow_closes_most_of_the_gap() {
    let dir = tempfile::tempdir().unwrap();
    // default sizes: smaller clouds sit too close to the sampling floor of W2
    let body = "output_dir = \"out\"\nbase = \"gaussian\"\nsolvers = [\"wgf\"]\n";
    let out = baryflow(&["toy", config(dir.path(), body).to_str().unwrap()]);
    assert!(out.status.success(), "{}", stderr(&out));
    let table = rows(&dir.path().join("out/table.csv"));
    assert_eq!(table[0], ["solver", "w2_to_ref"]);
    let w2 = |name: &str| table.iter().find(|r| r[0] == name).unwrap()[1].parse::<f64>().unwrap();
    assert!(w2("wgf") <= 0.2 * w2("init"), "init {} wgf {}", w2("init"), w2("wgf"));
}

#[test]
fn ablation_table_has_one_row_per_combination() {
    let dir = tempfile::tempdir().unwrap();
    let body = "output_dir = \"out\"\nn_seeds = 1\n[data.synthetic]\nn_samples = 150\n\
        [msda.flow]\nn_particles = 96\nbatch_size = 64\nn_iter = 20\n";
    let out = baryflow(&["msda", config(dir.path(), body).to_str().unwrap()]);
    assert!(out.status.success(), "{}", stderr(&out));
    let table = rows(&dir.path().join("out/ablation.csv"));
    assert_eq!(table[0], ["combo", "accuracy_source_only", "accuracy_adapted", "n_seeds"]);
    let combos: Vec<&str> = table[1..].iter().map(|r| r[0].as_str()).collect();
    assert_eq!(combos, ["B", "B+V", "B+U", "B+V+U"]);
}
