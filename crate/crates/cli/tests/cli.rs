use std::process::{Command, Output};

use chatmpc_core::session::{read_log, OutcomeReason};

fn chatmpc(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_chatmpc")).args(args).output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn classify_prints_the_marker() {
    let o = chatmpc(&["classify", "--text", "Please separate from the vase."]);
    assert_eq!(o.status.code(), Some(0));
    assert_eq!(stdout(&o).lines().next(), Some("[-1, 0]"));
}

#[test]
fn classify_writes_json() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("c.json");
    let o = chatmpc(&["--out", out.to_str().unwrap(), "classify", "--corpus", "driving", "--text", "obstacle in front!"]);
    assert_eq!(o.status.code(), Some(0));
    let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out).unwrap()).unwrap();
    assert_eq!(v["marker"], serde_json::json!([0, 1, 0]));
    assert_eq!(v["applied"], true);
}

#[test]
fn theory_prints_bounds() {
    let o = chatmpc(&["theory", "--gamma", "0.5", "--eta0", "1", "--eps", "0.01", "--e0", "3.7"]);
    let s = stdout(&o);
    let first = s.lines().next().unwrap();
    assert!(first.starts_with("C=2 D=4"), "{first}");
    assert!(first.contains("flips=6 tau*<=12 prompts<=14"), "{first}");
}

#[test]
fn unknown_flag_is_a_usage_error() {
    assert_eq!(chatmpc(&["run", "--bogus"]).status.code(), Some(2));
    assert_eq!(chatmpc(&["run", "--scenario", "nav-c"]).status.code(), Some(2));
}

#[test]
fn bad_config_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.toml");
    std::fs::write(&path, "seed = 1\n[scenario.navigation]\nenv = \"A\"\nbogus = 3\n").unwrap();
    let o = chatmpc(&["--config", path.to_str().unwrap(), "run"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("scenario.navigation"));
    let missing = dir.path().join("missing.toml");
    assert_eq!(chatmpc(&["--config", missing.to_str().unwrap(), "run"]).status.code(), Some(2));
}

#[test]
fn collision_exits_one() {
    let o = chatmpc(&["run", "--scenario", "drive-2", "--no-prompts"]);
    assert_eq!(o.status.code(), Some(1), "{}", stdout(&o));
}

#[test]
fn run_writes_a_readable_log() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("a.ndjson");
    let o = chatmpc(&["--seed", "3", "--out", out.to_str().unwrap(), "run", "--scenario", "nav-b"]);
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
    let log = read_log(&out).unwrap();
    assert_eq!(log.header().unwrap().config.seed, 3);
    assert_eq!(log.outcome().unwrap().reason, OutcomeReason::Goal);
}

#[test]
fn trials_write_one_log_each() {
    let dir = tempfile::tempdir().unwrap();
    let o = chatmpc(&["--out", dir.path().to_str().unwrap(), "trials", "--count", "2"]);
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
    let t2 = read_log(&dir.path().join("trial-2.ndjson")).unwrap();
    assert_eq!(t2.header().unwrap().trial, 2);
    let p = t2.prompts().next().expect("trial-2 prompt");
    assert_eq!((p.k, p.theta_after.clone()), (0, vec![0.2, 0.4]));
}

#[test]
fn plot_without_logs_writes_convergence_curve() {
    let dir = tempfile::tempdir().unwrap();
    let o = chatmpc(&["--out", dir.path().to_str().unwrap(), "plot"]);
    assert_eq!(o.status.code(), Some(0));
    let csv = std::fs::read_to_string(dir.path().join("convergence.csv")).unwrap();
    assert!(csv.starts_with("tau,abs_error,envelope,envelope_corrected\n"));
    assert_eq!(csv.lines().count(), 62);
}
