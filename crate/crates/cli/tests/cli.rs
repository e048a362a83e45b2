use std::path::Path;
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_nnident");

fn nnident(args: &[&str], root: &Path) -> Output {
    Command::new(BIN)
        .args(args)
        .env("NNIDENT_OUTPUT_ROOT", root)
        .output()
        .expect("binary runs")
}

fn write_config(dir: &Path, name: &str, text: &str) -> String {
    let path = dir.join(name);
    std::fs::write(&path, text).unwrap();
    path.to_string_lossy().into_owned()
}

const SHORT_RUN: &str = r#"
scenario = "identification"
duration = 2.0
output_dir = "short"
"#;

#[test]
fn run_writes_artifacts_under_the_output_root() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "short.toml", SHORT_RUN);
    let out = nnident(&["run", &cfg], tmp.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let dir = tmp.path().join("short");
    for f in ["run.csv", "summary.json", "config.toml", "weights_initial.txt", "weights_final.txt"] {
        assert!(dir.join(f).exists(), "missing {f}");
    }
    assert!(String::from_utf8_lossy(&out.stdout).contains("identification"));
}

#[test]
fn rerun_is_byte_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "short.toml", SHORT_RUN);
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    for dir in [&a, &b] {
        let out = nnident(&["run", &cfg, "--out", dir.to_str().unwrap()], tmp.path());
        assert!(out.status.success());
    }
    assert_eq!(std::fs::read(a.join("run.csv")).unwrap(), std::fs::read(b.join("run.csv")).unwrap());
}

#[test]
fn invalid_hyperparameters_exit_with_code_2() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "bad.toml", "[learner]\ngamma = 0.5\n");
    let out = nnident(&["run", &cfg], tmp.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("gamma = 0.5 must be > 1"));
}

#[test]
fn unknown_keys_exit_with_code_2() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "typo.toml", "durration = 3.0\n");
    assert_eq!(nnident(&["run", &cfg], tmp.path()).status.code(), Some(2));
}

#[test]
fn missing_config_exits_with_code_2() {
    let tmp = tempfile::tempdir().unwrap();
    let missing = tmp.path().join("nope.toml");
    assert_eq!(nnident(&["run", missing.to_str().unwrap()], tmp.path()).status.code(), Some(2));
}

#[test]
fn divergence_exits_with_code_3_and_marks_the_run() {
    let tmp = tempfile::tempdir().unwrap();
    let text = r#"
duration = 5.0
output_dir = "diverged"

[learner.rates]
inertia_hidden = 1e9
inertia_output = 1e9
coriolis_hidden = 1e9
coriolis_output = 1e9
gravity_hidden = 1e9
gravity_output = 1e9
"#;
    let cfg = write_config(tmp.path(), "diverge.toml", text);
    let out = nnident(&["run", &cfg], tmp.path());
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
    let dir = tmp.path().join("diverged");
    assert!(dir.join("FAILED").exists());
    assert!(dir.join("run.csv").exists());
}

#[test]
fn sweep_values_come_from_the_command_line() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "short.toml", "duration = 1.0\n[learner]\nenforce_gamma_le_alpha = false\n");
    let out_dir = tmp.path().join("sweep");
    let out = nnident(
        &["sweep", &cfg, "--param", "alpha", "--values", "1,5", "--out", out_dir.to_str().unwrap()],
        tmp.path(),
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(out_dir.join("sweep.csv").exists());
    assert!(out_dir.join("alpha_1").join("run.csv").exists());
    assert!(out_dir.join("alpha_5").join("run.csv").exists());
}
