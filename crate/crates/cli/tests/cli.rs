use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use serde_json::Value;

fn root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..").canonicalize().unwrap()
}

fn acbi(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_acbi"))
        .args(args)
        .current_dir(root())
        .output()
        .unwrap()
}

fn write_config(dir: &Path, name: &str, text: &str) -> String {
    let path = dir.join(name);
    std::fs::write(&path, text).unwrap();
    path.to_string_lossy().into_owned()
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

const QUICK: &str = "
[data]
test_samples = 80
[train]
epochs = 1
lr = 0.01
[attack]
epsilon = 0.1
alpha = 0.025
[sweep]
n_init = [0, 2]
seeds = [0]
[export]
examples = 30
";

/// One quickly trained model shared by every test that needs a checkpoint.
fn trained() -> &'static Path {
    static DIR: OnceLock<tempfile::TempDir> = OnceLock::new();
    DIR.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let config = write_config(dir.path(), "quick.toml", QUICK);
        let out = acbi(&["train", "--config", &config, "--out", &dir.path().to_string_lossy()]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        dir
    })
    .path()
}

#[test]
fn unknown_config_key_is_a_configuration_error() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), "bad.toml", "[attack]\nepsilonn = 0.1\n");
    let out = acbi(&["show-config", "--config", &config]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("epsilonn"));
}

#[test]
fn invalid_values_are_configuration_errors() {
    let dir = tempfile::tempdir().unwrap();
    for text in ["[attack]\nepsilon = -0.1\n", "[attack]\nalpha = 0.0\n", "[train]\nbatch_size = 0\n"] {
        let config = write_config(dir.path(), "bad.toml", text);
        assert_eq!(acbi(&["show-config", "--config", &config]).status.code(), Some(1), "{text}");
    }
}

#[test]
fn missing_files_are_io_errors() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("absent.toml");
    assert_eq!(acbi(&["show-config", "--config", &missing.to_string_lossy()]).status.code(), Some(3));
    let out = acbi(&["attack", "--out", &dir.path().to_string_lossy()]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn flags_override_the_file() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), "c.toml", "seed = 3\n");
    let out = acbi(&["show-config", "--config", &config, "--seed", "11", "--workers", "2"]);
    assert!(out.status.success());
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("seed = 11"), "{text}");
    // worker count and output directory never reach outputs
    assert!(!text.contains("workers") && !text.contains("out ="), "{text}");
}

#[test]
fn zero_budget_leaves_only_clean_errors() {
    let dir = tempfile::tempdir().unwrap();
    let text = format!("{QUICK}\n[model]\ncheckpoint = \"{}\"\n", trained().join("model.ckpt").display())
        .replace("epsilon = 0.1", "epsilon = 0.0");
    let config = write_config(dir.path(), "eps0.toml", &text);
    let out = acbi(&["attack", "--config", &config, "--out", &dir.path().to_string_lossy()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let report = &json(&dir.path().join("report.json"))["report"];
    assert_eq!(report["robust_accuracy"], report["clean_accuracy"]);
    assert_eq!(report["examples"], 80);
    assert_eq!(report["schema_version"], 1);
}

#[test]
fn attack_sweep_and_export_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let text = format!("{QUICK}\n[model]\ncheckpoint = \"{}\"\n", trained().join("model.ckpt").display());
    let config = write_config(dir.path(), "c.toml", &text);
    let out_dir = dir.path().to_string_lossy().into_owned();
    for cmd in ["attack", "sweep", "export-repr"] {
        let out = acbi(&[cmd, "--config", &config, "--out", &out_dir]);
        assert!(out.status.success(), "{cmd}: {}", String::from_utf8_lossy(&out.stderr));
    }

    let report = json(&dir.path().join("report.json"));
    assert_eq!(report["command"], "attack");
    assert_eq!(report["report"]["attack_id"], "acbi-pgd-4-25");
    assert_eq!(report["report"]["outcomes"].as_array().unwrap().len(), 80);
    assert!(report["config"].get("workers").is_none());

    let sweep = std::fs::read_to_string(dir.path().join("sweep.csv")).unwrap();
    let rows: Vec<&str> = sweep.lines().filter(|l| !l.starts_with('#')).collect();
    assert!(rows[0].starts_with("n_init,n_attack,total_budget,seed"));
    assert!(rows[1].starts_with("0,25,25,0,80,"));
    assert!(rows[2].starts_with("2,23,25,0,80,"));

    let bounds = std::fs::read_to_string(dir.path().join("repr_boundaries.csv")).unwrap();
    let rows: Vec<&str> = bounds.lines().filter(|l| !l.starts_with('#')).collect();
    assert_eq!(rows[0], "pair_i,pair_j,w_0,w_1,bias");
    let pairs: Vec<String> = rows[1..].iter().map(|r| r.split(',').take(2).collect::<Vec<_>>().join(",")).collect();
    assert_eq!(pairs, ["0,1", "0,2", "0,3", "1,2", "1,3", "2,3"]);

    let points = std::fs::read_to_string(dir.path().join("repr_points.csv")).unwrap();
    let records = points.lines().filter(|l| !l.starts_with('#')).count() - 1;
    assert_eq!(records, 60);
}

#[test]
fn verify_passes() {
    let dir = tempfile::tempdir().unwrap();
    let out = acbi(&["verify", "--out", &dir.path().to_string_lossy()]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stdout));
    let checks = json(&dir.path().join("verify.json"))["checks"].as_array().unwrap().clone();
    assert!(!checks.is_empty());
    assert!(checks.iter().all(|c| c["passed"] == true));
}
