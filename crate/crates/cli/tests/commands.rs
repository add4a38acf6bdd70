use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use arlif_cli::TRAIN_OUTPUTS;

fn arlif(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_arlif")).args(args).output().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn write_config(dir: &Path, name: &str, body: &str) -> String {
    let p = dir.join(name);
    fs::write(&p, body).unwrap();
    p.to_str().unwrap().to_string()
}

const SYNTHETIC: &str = r#"{
  "dataset": {"kind": "synthetic", "pattern": "two_class_rates", "train_samples": 64, "test_samples": 32},
  "network": {"preset": "mlp", "hidden": [16]},
  "optimizer": {"epochs": 1, "batch_size": 16},
  "timesteps": 4
}"#;

#[test]
fn missing_dataset_file_is_a_usage_error_naming_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "c.json",
        r#"{"dataset": {"kind": "mnist", "dir": "nowhere"}, "network": {"preset": "mlp", "hidden": [8]}, "timesteps": 2}"#,
    );
    let out = dir.path().join("out");
    let o = arlif(&["train", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    let msg = stderr(&o);
    assert!(msg.contains("nowhere") && msg.contains("train-images-idx3-ubyte"), "{msg}");
}

#[test]
fn zero_timesteps_is_rejected_with_its_line() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.json", &SYNTHETIC.replace("\"timesteps\": 4", "\"timesteps\": 0"));
    let o = arlif(&["train", "--config", &cfg, "--out", dir.path().join("o").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("c.json:5"), "{}", stderr(&o));
}

#[test]
fn train_writes_every_output_and_refuses_to_overwrite() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.json", SYNTHETIC);
    let out = dir.path().join("run");
    let o = arlif(&["train", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    for name in TRAIN_OUTPUTS {
        assert!(out.join(name).is_file(), "{name} missing");
    }
    let again = arlif(&["train", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert_eq!(again.status.code(), Some(2));

    let model = out.join("model.json");
    let e = arlif(&["eval", "--config", &cfg, "--model", model.to_str().unwrap()]);
    assert!(e.status.success(), "{}", stderr(&e));
    let summary: serde_json::Value = serde_json::from_slice(&e.stdout).unwrap();
    assert!(summary["accuracy"].as_f64().unwrap() >= 0.0);

    let runlog = out.join("runlog.json");
    let en = arlif(&["energy", "--runlog", runlog.to_str().unwrap()]);
    assert!(en.status.success(), "{}", stderr(&en));
}

#[test]
fn ablate_emits_six_rows() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.json", SYNTHETIC);
    let out = dir.path().join("abl");
    let o = arlif(&["ablate", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = fs::read_to_string(out.join("ablation.csv")).unwrap();
    assert_eq!(csv.lines().count(), 7);
    assert!(csv.starts_with("mode,test_accuracy"));
}

#[test]
fn oracle_check_passes_and_flags_a_corrupted_decay() {
    let ok = arlif(&["oracle-check", "--trials", "300"]);
    assert!(ok.status.success(), "{}", stderr(&ok));
    let bad = arlif(&["oracle-check", "--trials", "300", "--corrupt-decay", "0.7"]);
    assert_eq!(bad.status.code(), Some(1));
}

#[test]
fn energy_reads_pairs_from_stdin() {
    use std::io::Write;
    let mut child = Command::new(env!("CARGO_BIN_EXE_arlif"))
        .arg("energy")
        .stdin(std::process::Stdio::piped())
        .stdout(std::process::Stdio::piped())
        .spawn()
        .unwrap();
    child.stdin.take().unwrap().write_all(b"1 1\nbad line\n").unwrap();
    let o = child.wait_with_output().unwrap();
    assert_eq!(o.status.code(), Some(2));
    let mut child = Command::new(env!("CARGO_BIN_EXE_arlif"))
        .arg("energy")
        .stdin(std::process::Stdio::piped())
        .stdout(std::process::Stdio::piped())
        .spawn()
        .unwrap();
    child.stdin.take().unwrap().write_all(b"1 1\n").unwrap();
    let o = child.wait_with_output().unwrap();
    assert!(o.status.success());
    assert!(String::from_utf8_lossy(&o.stdout).contains("1,1,5.500"));
}
