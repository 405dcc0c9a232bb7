//! The binary's stage commands, exit codes and error reporting.

use std::collections::BTreeMap;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

const ORACLE_ENV: &str = "RECALL_FORGE_ORACLE_URL";
/// Nothing listens on the discard port.
const DEAD_ORACLE: &str = "http://127.0.0.1:9";

fn cli(args: &[&str], dir: &Path) -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_recall-forge"));
    cmd.args(args).current_dir(dir).env_remove(ORACLE_ENV);
    cmd
}

fn run(args: &[&str], dir: &Path) -> Output {
    cli(args, dir).output().unwrap()
}

fn stdout_json(o: &Output) -> Value {
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    serde_json::from_slice(&o.stdout).unwrap()
}

/// Exit code plus the error object printed on stderr.
fn failure(o: &Output) -> (i32, Value) {
    assert!(!o.status.success());
    let body: Value = serde_json::from_slice(&o.stderr).unwrap_or(Value::Null);
    (o.status.code().unwrap(), body)
}

fn tree(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(dir).unwrap().display().to_string(), std::fs::read(&p).unwrap());
            }
        }
    }
    out
}

fn through_mining(out: &str, dir: &Path) {
    for stage in ["gen-world", "train-base", "mine"] {
        stdout_json(&run(&[stage, "--out", out], dir));
    }
}

#[test]
fn stages_in_sequence_match_the_pipeline() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    let summary = stdout_json(&run(&["pipeline", "--out", "whole", "--seed", "3"], d));
    assert_eq!(summary["run_dir"], "whole");
    assert!(summary["text"].as_str().unwrap().contains("Samples (Generated → Kept)"));

    stdout_json(&run(&["gen-world", "--out", "staged", "--seed", "3"], d));
    for stage in ["train-base", "mine", "calibrate", "refine", "evaluate", "report"] {
        stdout_json(&run(&[stage, "--out", "staged"], d));
    }
    assert_eq!(tree(&d.join("whole")), tree(&d.join("staged")));
}

#[test]
fn evaluate_is_repeatable() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    stdout_json(&run(&["gen-world", "--out", "r"], d));
    stdout_json(&run(&["train-base", "--out", "r"], d));
    let first = run(&["evaluate", "--out", "r"], d);
    let second = run(&["evaluate", "--out", "r"], d);
    assert_eq!(first.stdout, second.stdout);
    let v = stdout_json(&first);
    assert!(v.get("base").is_some() && v.get("refine").is_none());

    let single = stdout_json(&run(&["evaluate", "--out", "r", "--snapshot", "r/base.encoder.json"], d));
    assert_eq!(single["metrics"], v["base"]);
}

#[test]
fn fresh_runs_get_a_hashed_directory() {
    let tmp = tempfile::tempdir().unwrap();
    let v = stdout_json(&run(&["gen-world"], tmp.path()));
    assert!(v["queries"].as_u64().unwrap() > 0);
    let runs: Vec<_> = std::fs::read_dir(tmp.path().join("runs")).unwrap().collect();
    assert_eq!(runs.len(), 1);
    let name = runs[0].as_ref().unwrap().file_name().into_string().unwrap();
    let (hash, ts) = name.split_once('-').unwrap();
    assert_eq!(hash.len(), 12);
    assert!(ts.parse::<u64>().is_ok());
}

#[test]
fn report_renders_a_calibration_summary() {
    let tmp = tempfile::tempdir().unwrap();
    let path = tmp.path().join("cal.json");
    std::fs::write(
        &path,
        r#"{"requested": 64105, "generated": 64105, "discarded": 0, "kept": 58650, "rejected": 5455}"#,
    )
    .unwrap();
    let v = stdout_json(&run(&["report", "--calibration", path.to_str().unwrap()], tmp.path()));
    let line = v["report"].as_str().unwrap();
    assert!(line.contains("64,105 → 58,650"), "{line}");
}

#[test]
fn missing_inputs_exit_3() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    for args in [
        vec!["train-base", "--out", "empty"],
        vec!["report", "--calibration", "nope.json"],
        vec!["gen-world", "--config", "absent.json", "--out", "x"],
    ] {
        let (code, body) = failure(&run(&args, d));
        assert_eq!(code, 3, "{args:?}");
        assert_eq!(body["error"]["kind"], "missing_input");
        assert_eq!(body["error"]["exit_code"], 3);
    }
    stdout_json(&run(&["gen-world", "--out", "w"], d));
    let (code, _) = failure(&run(&["refine", "--out", "w"], d));
    assert_eq!(code, 3);
}

#[test]
fn usage_errors_exit_2() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    let (code, body) = failure(&run(&["mine"], d));
    assert_eq!(code, 2);
    assert_eq!(body["error"]["kind"], "usage");

    let (code, _) = failure(&run(&["no-such-stage"], d));
    assert_eq!(code, 2);
    let (code, _) = failure(&run(&["pipeline", "--profile", "imagenet"], d));
    assert_eq!(code, 2);

    let cfg = d.join("neg.json");
    std::fs::write(&cfg, r#"{"mining": {"top_k": 0}}"#).unwrap();
    let (code, _) = failure(&run(&["gen-world", "--config", cfg.to_str().unwrap(), "--out", "n"], d));
    assert_eq!(code, 2);
}

#[test]
fn malformed_config_exits_4() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    for (name, text) in [("bad.json", "{ not json"), ("unknown.json", r#"{"stage9": {}}"#)] {
        let cfg = d.join(name);
        std::fs::write(&cfg, text).unwrap();
        let (code, body) = failure(&run(&["gen-world", "--config", cfg.to_str().unwrap(), "--out", "b"], d));
        assert_eq!(code, 4, "{name}: {body}");
        assert_eq!(body["error"]["kind"], "schema");
    }
}

#[test]
fn unreachable_oracle_exits_5() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    through_mining("o", d);

    let (code, body) = failure(&run(&["calibrate", "--out", "o", "--oracle-url", DEAD_ORACLE], d));
    assert_eq!(code, 5);
    assert_eq!(body["error"]["kind"], "oracle_unreachable");

    // the environment variable stands in for the flag
    let o = cli(&["calibrate", "--out", "o"], d).env(ORACLE_ENV, DEAD_ORACLE).output().unwrap();
    assert_eq!(failure(&o).0, 5);

    // an empty value means the built-in mock
    let o = cli(&["calibrate", "--out", "o"], d).env(ORACLE_ENV, "").output().unwrap();
    assert!(stdout_json(&o)["summary"]["kept"].as_u64().unwrap() > 0);
}

#[test]
fn malformed_oracle_url_is_a_usage_error() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    through_mining("u", d);
    let (code, _) = failure(&run(&["calibrate", "--out", "u", "--oracle-url", "ftp://host"], d));
    assert_eq!(code, 2);
}
