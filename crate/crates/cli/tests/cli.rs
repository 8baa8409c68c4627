use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const SMALL: &str = "n_train = 200\nn_test = 100\nbatch_size = 50\ninput_dim = 6\nclasses = 3\nwidths = [8, 3]\n\
                     epochs = 2\nrecord_every = 2\n";

fn timescale(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_timescale"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn write_config(dir: &Path, name: &str, text: &str) -> String {
    let path = dir.join(name);
    fs::write(&path, text).unwrap();
    path.to_string_lossy().into_owned()
}

#[test]
fn train_writes_record_and_summary() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "run.toml", SMALL);
    let o = timescale(dir.path(), &["train", "--config", &cfg, "--out", "out"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let runs: Vec<_> = fs::read_dir(dir.path().join("out/runs")).unwrap().collect();
    assert_eq!(runs.len(), 1);
    let summary = fs::read_to_string(dir.path().join("out/summary.csv")).unwrap();
    assert!(summary.starts_with("run_id,"));
    assert_eq!(summary.lines().count(), 2);
}

#[test]
fn train_is_deterministic_and_seed_overrides() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "run.toml", SMALL);
    let read_run = |out: &str| {
        let entry = fs::read_dir(dir.path().join(out).join("runs"))
            .unwrap()
            .next()
            .unwrap()
            .unwrap();
        fs::read(entry.path()).unwrap()
    };
    for out in ["a", "b"] {
        assert!(timescale(dir.path(), &["train", "--config", &cfg, "--out", out])
            .status
            .success());
    }
    assert!(
        timescale(dir.path(), &["train", "--config", &cfg, "--out", "c", "--seed", "5"])
            .status
            .success()
    );
    assert_eq!(read_run("a"), read_run("b"));
    assert_ne!(read_run("a"), read_run("c"));
}

#[test]
fn json_format_adds_summary_json() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "run.toml", SMALL);
    let o = timescale(dir.path(), &["train", "--config", &cfg, "--format", "json"]);
    assert!(o.status.success());
    let text = fs::read_to_string(dir.path().join("out/summary.json")).unwrap();
    let v: serde_json::Value = serde_json::from_str(&text).unwrap();
    assert!(v.get("runs").is_some());
}

#[test]
fn sweep_marks_an_argmin_per_column() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "sweep.toml",
        &format!("{SMALL}sweep_lambda = [0.1, 1.0]\nsweep_n_train = [200, 400]\n"),
    );
    let o = timescale(dir.path(), &["sweep", "--config", &cfg, "--parallel", "2"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = stdout(&o);
    assert_eq!(text.lines().filter(|l| l.ends_with('*')).count(), 2, "{text}");
    let summary = fs::read_to_string(dir.path().join("out/summary.csv")).unwrap();
    assert_eq!(summary.lines().count(), 5);
}

#[test]
fn report_rebuilds_summary_from_records() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "sweep.toml", &format!("{SMALL}sweep_lambda = [0.1, 1.0]\n"));
    assert!(timescale(dir.path(), &["sweep", "--config", &cfg, "--out", "runs"])
        .status
        .success());
    let o = timescale(dir.path(), &["report", "runs", "--out", "again"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(
        fs::read_to_string(dir.path().join("runs/summary.csv")).unwrap(),
        fs::read_to_string(dir.path().join("again/summary.csv")).unwrap()
    );
}

#[test]
fn plan_prints_rules_and_writes_configs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "plan.toml",
        &format!("{SMALL}plan_n_train = 400\nplan_width = 2.0\nplan_c = 2.0\n"),
    );
    let o = timescale(dir.path(), &["plan", "--config", &cfg, "--out", "planned"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = stdout(&o);
    for rule in ["base", "dataset", "width-direct", "width-timescale-fixed", "equivalent"] {
        assert!(text.lines().any(|l| l.starts_with(rule)), "missing {rule} in\n{text}");
    }
    assert!(text.contains("timescale-breaking"));
    let planned = dir.path().join("planned/dataset.toml");
    let o = timescale(dir.path(), &["train", "--config", planned.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn verify_theorem1_passes_with_controls() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "run.toml", SMALL);
    let o = timescale(
        dir.path(),
        &["verify-theorem1", "--config", &cfg, "--controls", "--out", "v"],
    );
    assert!(o.status.success(), "{}", stdout(&o));
    assert!(stdout(&o).trim_end().ends_with("PASS"));
    assert!(dir.path().join("v/theorem1.json").exists());
}

#[test]
fn verify_theorem1_fails_when_controls_cannot_break() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "run.toml", SMALL);
    let o = timescale(
        dir.path(),
        &[
            "verify-theorem1",
            "--config",
            &cfg,
            "--steps",
            "8",
            "--controls",
            "--control-threshold",
            "1e9",
        ],
    );
    assert_eq!(o.status.code(), Some(1));
    assert!(stdout(&o).trim_end().ends_with("FAIL"));
}

#[test]
fn verify_theorem1_rejects_hypothesis_violations() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "run.toml",
        &format!("{SMALL}norm_affine = true\nnorm_lr_coupled = true\n"),
    );
    let o = timescale(dir.path(), &["verify-theorem1", "--config", &cfg, "--steps", "2"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("affine"));
}

#[test]
fn ema_check_passes() {
    let dir = tempfile::tempdir().unwrap();
    let o = timescale(dir.path(), &["ema-check", "--gamma", "0.01,0.1", "--samples", "200000"]);
    assert!(o.status.success(), "{}", stdout(&o));
    assert!(!stdout(&o).contains("FAIL"));
}

#[test]
fn invalid_config_exits_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let unknown = write_config(dir.path(), "a.toml", "not_a_field = 1\n");
    assert_eq!(
        timescale(dir.path(), &["train", "--config", &unknown]).status.code(),
        Some(2)
    );
    let partial = write_config(dir.path(), "b.toml", "n_train = 250\nbatch_size = 100\n");
    let o = timescale(dir.path(), &["train", "--config", &partial]);
    assert_eq!(o.status.code(), Some(2), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(timescale(dir.path(), &["no-such-command"]).status.code(), Some(2));
}

#[test]
fn missing_config_file_is_a_runtime_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = timescale(dir.path(), &["train", "--config", "absent.toml"]);
    assert_eq!(o.status.code(), Some(1));
}
