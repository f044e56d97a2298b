use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use sha2::{Digest, Sha256};

fn phicnet(args: &[&str], config: &Path, out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_phicnet"))
        .args(args)
        .arg("--config")
        .arg(config)
        .arg("--out")
        .arg(out)
        .arg("--threads")
        .arg("1")
        .output()
        .expect("binary runs")
}

fn write_config(dir: &Path, name: &str, json: &str) -> std::path::PathBuf {
    let path = dir.join(name);
    fs::write(&path, json).unwrap();
    path
}

const SMALL: &str = r#"{
    "system": "heat",
    "seed": 3,
    "dataset": {"frames_per_seq": 16, "counts": {"train": 2, "val": 1, "test": 2}},
    "model": {"kind": "phicnet", "K": 1, "widths": [4, 4]},
    "train": {"epochs": 2, "lr": 0.001},
    "eval": {"horizon": 5, "snapshots": [1, 5]}
}"#;

fn assert_ok(out: &Output) {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
}

fn sha(path: &Path) -> Vec<u8> {
    Sha256::digest(fs::read(path).unwrap()).to_vec()
}

#[test]
fn generate_is_reproducible_per_seed() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.json", SMALL);
    let (a, b, c) = (dir.path().join("a"), dir.path().join("b"), dir.path().join("c"));
    assert_ok(&phicnet(&["generate"], &cfg, &a));
    assert_ok(&phicnet(&["generate"], &cfg, &b));
    assert_ok(&phicnet(&["generate", "--seed", "4"], &cfg, &c));
    let blob = "heat_desk.frames.bin";
    assert_eq!(sha(&a.join(blob)), sha(&b.join(blob)));
    assert_ne!(sha(&a.join(blob)), sha(&c.join(blob)));
    assert!(a.join("heat_desk.manifest.json").exists());
    let resolved: serde_json::Value = serde_json::from_str(&fs::read_to_string(c.join("run_config.json")).unwrap()).unwrap();
    assert_eq!(resolved["seed"], 4);
}

#[test]
fn train_eval_and_resume() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.json", SMALL);
    let run = dir.path().join("run");
    assert_ok(&phicnet(&["train"], &cfg, &run));
    let curve = fs::read_to_string(run.join("loss_curve.csv")).unwrap();
    assert_eq!(curve.lines().count(), 3);
    assert!(run.join("heat_phicnet.ckpt.json").exists());
    assert!(run.join("heat_phicnet_last.params.bin").exists());

    let ckpt = run.join("heat_phicnet.ckpt.json");
    let eval_cfg = SMALL.replacen("\"system\"", &format!("\"paths\": {{\"checkpoint\": {:?}}},\n    \"system\"", ckpt), 1);
    let cfg2 = write_config(dir.path(), "eval.json", &eval_cfg);
    let ev = dir.path().join("eval");
    assert_ok(&phicnet(&["eval"], &cfg2, &ev));
    let report = fs::read_to_string(ev.join("horizon_phicnet.csv")).unwrap();
    let mut lines = report.lines();
    assert_eq!(lines.next(), Some("step,metric,mean,ci_lo,ci_hi,model_tag"));
    assert_eq!(lines.count(), 10);
    for name in ["t001_u_true_c0", "t005_u_hat_c0", "t005_v_true_c0", "t005_v_hat_c0"] {
        let bytes = fs::read(ev.join("snapshots").join(format!("{name}.pgm"))).unwrap();
        assert!(bytes.starts_with(b"P5\n16 16\n255\n"));
    }

    let last = run.join("heat_phicnet_last.ckpt.json");
    let resume_cfg = SMALL.replacen("\"system\"", &format!("\"paths\": {{\"checkpoint\": {:?}}},\n    \"system\"", last), 1);
    let cfg3 = write_config(dir.path(), "resume.json", &resume_cfg);
    assert_ok(&phicnet(&["train"], &cfg3, &dir.path().join("resumed")));
}

#[test]
fn zero_learning_rate_keeps_the_initial_model() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.json", &SMALL.replace("\"lr\": 0.001", "\"lr\": 0.0"));
    let run = dir.path().join("run");
    assert_ok(&phicnet(&["train"], &cfg, &run));
    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(run.join("heat_phicnet.ckpt.json")).unwrap()).unwrap();
    assert_eq!(manifest["model_kind"], "phicnet");
    let blob = fs::read(run.join("heat_phicnet.params.bin")).unwrap();
    let theta = f64::from_le_bytes(blob[..8].try_into().unwrap());
    assert_eq!(theta, 0.1);
    // identity path still holds its initial weight
    let w_vc = f64::from_le_bytes(blob[8..16].try_into().unwrap());
    assert_eq!(w_vc, 1.0);
}

#[test]
fn adapt_on_a_constant_parameter_never_triggers() {
    let dir = tempfile::tempdir().unwrap();
    let json = r#"{"system": "wave", "model": {"K": 2, "widths": [4, 4]}, "adapt": {"frames": 40}}"#;
    let cfg = write_config(dir.path(), "c.json", json);
    let run = dir.path().join("run");
    assert_ok(&phicnet(&["adapt"], &cfg, &run));
    let trace = fs::read_to_string(run.join("adapt_trace.csv")).unwrap();
    let mut lines = trace.lines();
    assert_eq!(lines.next(), Some("step,error,triggered,theta_estimate,theta_true"));
    let rows: Vec<Vec<&str>> = lines.map(|l| l.split(',').collect()).collect();
    assert_eq!(rows.len(), 40 - 4);
    assert!(rows.iter().all(|r| r[2] == "0" && r[3] == "0.25" && r[4] == "0.25"));
}

#[test]
fn configuration_errors_exit_with_code_two() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let empty = write_config(dir.path(), "sweep.json", r#"{"sweep": {"variable": "K", "values": []}}"#);
    assert_eq!(phicnet(&["sweep"], &empty, &out).status.code(), Some(2));
    let typo = write_config(dir.path(), "typo.json", r#"{"sytem": "heat"}"#);
    assert_eq!(phicnet(&["generate"], &typo, &out).status.code(), Some(2));
    let no_ckpt = write_config(dir.path(), "eval.json", "{}");
    assert_eq!(phicnet(&["eval"], &no_ckpt, &out).status.code(), Some(2));
    let missing = dir.path().join("missing.json");
    assert_eq!(phicnet(&["train"], &missing, &out).status.code(), Some(2));
}

#[test]
fn unstable_parameters_are_configuration_errors() {
    let dir = tempfile::tempdir().unwrap();
    // beyond the explicit-scheme limit for the heat update
    let cfg = write_config(dir.path(), "c.json", r#"{"dataset": {"theta": 0.3}}"#);
    assert_eq!(phicnet(&["generate"], &cfg, &dir.path().join("out")).status.code(), Some(2));
}

#[test]
fn divergent_training_exits_with_code_three() {
    let dir = tempfile::tempdir().unwrap();
    let json = SMALL.replace("\"train\": {\"epochs\": 2, \"lr\": 0.001}", "\"train\": {\"epochs\": 3, \"lr\": 1e200, \"clip_norm\": 0.0}");
    let cfg = write_config(dir.path(), "c.json", &json);
    let run = dir.path().join("run");
    let out = phicnet(&["train"], &cfg, &run);
    assert_eq!(out.status.code(), Some(3), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    // the best checkpoint so far is still written
    assert!(run.join("heat_phicnet.ckpt.json").exists());
}
