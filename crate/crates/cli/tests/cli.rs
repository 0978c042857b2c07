use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = r#"{
  "corpus": {"train_tokens": 4000, "val_tokens": 1200},
  "pretrain": {"steps": 60},
  "train": {"steps": 40, "eval_every": 20, "eval_examples": 64},
  "checkpoint_every": 20,
  "ablations": ["uniform"],
  "search": {"phase1_n": 12, "phase2_n": 6, "eval_examples": 128, "constraints": [2.5, null]},
  "analysis": {"samples": 2000}
}"#;

fn qfa(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_qfa"))
        .arg("--out")
        .arg(dir)
        .args(args)
        .env_remove("QFA_SEED")
        .env("RUST_LOG", "warn")
        .output()
        .expect("spawn qfa")
}

fn tiny_config(dir: &Path) -> String {
    let path = dir.join("tiny.json");
    std::fs::write(&path, TINY).unwrap();
    path.to_string_lossy().into_owned()
}

fn stdout_json(out: &Output) -> serde_json::Value {
    serde_json::from_slice(&out.stdout).expect("printed config is json")
}

#[test]
fn pipeline_runs_and_echoes_config() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path());
    let out = qfa(tmp.path(), &["--config", &cfg, "--seed", "5", "pipeline"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let reports = tmp.path().join("reports");
    for f in ["eval_report.json", "frontier.csv", "ablation.csv", "config.json"] {
        assert!(reports.join(f).is_file(), "missing {f}");
    }
    let echoed: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(reports.join("config.json")).unwrap()).unwrap();
    assert_eq!(echoed["seed"], 5);
    assert_eq!(echoed["train"]["steps"], 40);

    // Every stage is marked done, so a resumed run leaves the report untouched.
    let before = std::fs::read(reports.join("eval_report.json")).unwrap();
    let again = qfa(tmp.path(), &["--config", &cfg, "--seed", "5", "pipeline", "--resume"]);
    assert!(again.status.success());
    assert_eq!(before, std::fs::read(reports.join("eval_report.json")).unwrap());
}

#[test]
fn seed_precedence_is_flag_over_env_over_file() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("seeded.json");
    std::fs::write(&cfg, r#"{"seed": 3}"#).unwrap();
    let cfg = cfg.to_string_lossy().into_owned();
    let run = |env: Option<&str>, extra: &[&str]| {
        let mut cmd = Command::new(env!("CARGO_BIN_EXE_qfa"));
        cmd.arg("--out").arg(tmp.path()).args(["--config", &cfg, "--print-config"]);
        cmd.args(extra).args(["gen-corpus", "--train-tokens", "200", "--val-tokens", "100"]);
        cmd.env_remove("QFA_SEED").env("RUST_LOG", "warn");
        if let Some(v) = env {
            cmd.env("QFA_SEED", v);
        }
        let out = cmd.output().unwrap();
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        stdout_json(&out)["seed"].as_u64().unwrap()
    };
    assert_eq!(run(None, &[]), 3);
    assert_eq!(run(Some("77"), &[]), 77);
    assert_eq!(run(Some("77"), &["--seed", "9"]), 9);
}

#[test]
fn unknown_config_key_is_a_config_error() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("bad.json");
    std::fs::write(&cfg, r#"{"train": {"stepz": 10}}"#).unwrap();
    let out = qfa(tmp.path(), &["--config", cfg.to_str().unwrap(), "gen-corpus"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn bad_env_seed_is_a_config_error() {
    let tmp = tempfile::tempdir().unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_qfa"))
        .arg("--out")
        .arg(tmp.path())
        .arg("gen-corpus")
        .env("QFA_SEED", "not-a-number")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn constraint_below_lowest_bit_is_infeasible() {
    let tmp = tempfile::tempdir().unwrap();
    let out = qfa(tmp.path(), &["search", "--constraint", "1.5"]);
    assert_eq!(out.status.code(), Some(4), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn missing_inputs_are_a_stage_failure() {
    let tmp = tempfile::tempdir().unwrap();
    let out = qfa(tmp.path(), &["quantize"]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("quantize failed"));
}
