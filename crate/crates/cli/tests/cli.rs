use std::path::Path;
use std::process::{Command, Output};

fn semsr(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_semsr")).args(args).output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn tiny_config(dir: &Path) -> String {
    let path = dir.join("run.toml");
    let text = format!(
        "seed = 7\nout_dir = {:?}\n\n[data]\nhr_size = 64\nlr_size = 16\ntrain_count = 6\nheldout_count = 2\ntest_count = 2\n",
        dir.join("run").display().to_string()
    );
    std::fs::write(&path, text).unwrap();
    path.display().to_string()
}

#[test]
fn help_and_version_exit_zero() {
    assert_eq!(code(&semsr(&["--help"])), 0);
    let v = semsr(&["--version"]);
    assert_eq!(code(&v), 0);
    assert!(String::from_utf8_lossy(&v.stdout).starts_with("semsr "));
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(code(&semsr(&[])), 1);
    assert_eq!(code(&semsr(&["train-everything"])), 1);
    let o = semsr(&["make-dataset"]);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("--config"));
}

#[test]
fn config_errors_exit_one_and_name_the_key() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.toml");
    std::fs::write(&path, "seed = 1\nout_dir = \"x\"\n[dape]\nlamda = 2.0\n").unwrap();
    let o = semsr(&["--config", path.to_str().unwrap(), "make-dataset"]);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("lamda"));
    assert_eq!(code(&semsr(&["--config", "/nonexistent.toml", "make-dataset"])), 1);
}

#[test]
fn broken_dependency_chain_names_the_missing_step() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let o = semsr(&["--config", &cfg, "train-sr"]);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("make-dataset"));
    assert_eq!(code(&semsr(&["--config", &cfg, "make-dataset"])), 0);
    let o = semsr(&["--config", &cfg, "train-sr"]);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("train-base"));
    let o = semsr(&["--config", &cfg, "evaluate"]);
    assert!(String::from_utf8_lossy(&o.stderr).contains("infer"));
}

#[test]
fn runtime_failures_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    assert_eq!(code(&semsr(&["--config", &cfg, "make-dataset"])), 0);
    let hr = std::fs::read_dir(dir.path().join("run/dataset/train/hr")).unwrap().next().unwrap().unwrap().path();
    std::fs::write(&hr, b"not a png").unwrap();
    let o = semsr(&["--config", &cfg, "train-teacher", "--steps", "1"]);
    assert_eq!(code(&o), 2, "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn make_dataset_writes_a_complete_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let out = dir.path().join("elsewhere");
    let o = semsr(&["--config", &cfg, "--seed", "11", "--out", out.to_str().unwrap(), "make-dataset"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stdout).contains("dataset: 10 images"));
    let m: serde_json::Value = serde_json::from_slice(&std::fs::read(out.join("manifests/make-dataset.json")).unwrap()).unwrap();
    assert_eq!(m["seed"], 11);
    assert_eq!(m["status"], "ok");
    let listed: Vec<&str> = m["outputs"].as_array().unwrap().iter().map(|v| v.as_str().unwrap()).collect();
    // 10 HR + 4 LR + recipes + dataset manifest + log
    assert_eq!(listed.len(), 17);
    for p in &listed {
        assert!(out.join(p).is_file(), "{p}");
    }
}
