use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_kaa-cal");

fn run(args: &[&str]) -> Output {
    Command::new(BIN).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let o = run(args);
    assert!(
        o.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&o.stderr)
    );
    String::from_utf8(o.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn write_config(dir: &Path) -> PathBuf {
    let p = dir.join("run.json");
    let cfg = serde_json::json!({
        "synth": { "train_size": 48, "val_size": 24, "test_size": 24, "joint_size": 60 },
        "kaa": { "cycles": 2, "batch_size": 16 },
        "cal": { "kappa": 2, "budgets": [4, 4], "epochs": 2, "batch_size": 8 },
        "decline_rate": 0.1
    });
    std::fs::write(&p, cfg.to_string()).unwrap();
    p
}

struct Pipeline {
    bundle: PathBuf,
    kaa: PathBuf,
}

fn pipeline(root: &Path, cfg: &Path, tag: &str) -> Pipeline {
    let bundle = root.join(format!("bundle-{tag}"));
    let kaa = root.join(format!("kaa-{tag}"));
    ok(&["gen-data", "--seed", "1", "--config", s(cfg), "--out", s(&bundle)]);
    ok(&["train-kaa", "--bundle", s(&bundle), "--seed", "1", "--config", s(cfg), "--out", s(&kaa)]);
    Pipeline { bundle, kaa }
}

fn run_cal(p: &Pipeline, cfg: &Path, sampler: &str, out: &Path) -> String {
    let ck = p.kaa.join("foundation.kac");
    ok(&[
        "run-cal",
        "--bundle",
        s(&p.bundle),
        "--checkpoint",
        s(&ck),
        "--sampler",
        sampler,
        "--seed",
        "1",
        "--config",
        s(cfg),
        "--out",
        s(out),
    ]);
    std::fs::read_to_string(out.join("metrics.csv")).unwrap()
}

#[test]
fn end_to_end_runs_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let a = pipeline(dir.path(), &cfg, "a");
    let b = pipeline(dir.path(), &cfg, "b");
    let kaa_a = std::fs::read(a.kaa.join("metrics.csv")).unwrap();
    assert_eq!(kaa_a, std::fs::read(b.kaa.join("metrics.csv")).unwrap());
    assert_eq!(
        std::fs::read(a.kaa.join("foundation.kac")).unwrap(),
        std::fs::read(b.kaa.join("foundation.kac")).unwrap()
    );
    let cal_a = run_cal(&a, &cfg, "cal", &dir.path().join("cal-a"));
    let cal_b = run_cal(&b, &cfg, "cal", &dir.path().join("cal-b"));
    assert_eq!(cal_a, cal_b);
    assert!(cal_a.lines().any(|l| l.starts_with("cal,2,0,test,")));

    // The random baseline reports the same row keys for side-by-side plots.
    let random = run_cal(&a, &cfg, "random", &dir.path().join("cal-r"));
    let keys = |csv: &str| -> Vec<String> {
        csv.lines().map(|l| l.split(',').take(4).collect::<Vec<_>>().join(",")).collect()
    };
    assert_eq!(keys(&cal_a), keys(&random));

    // export-metrics regenerates the CSV from the saved history.
    let exported = dir.path().join("exported.csv");
    ok(&["export-metrics", "--history", s(&a.kaa.join("kaa_history.json")), "--out", s(&exported)]);
    assert_eq!(std::fs::read(&exported).unwrap(), kaa_a);

    let out = ok(&[
        "eval",
        "--bundle",
        s(&a.bundle),
        "--checkpoint",
        s(&dir.path().join("cal-a/adapted.kac")),
        "--split",
        "joint",
        "--out",
        s(&dir.path().join("eval")),
    ]);
    let report: serde_json::Value = serde_json::from_str(out.trim()).unwrap();
    assert_eq!(report["per_task"].as_array().unwrap().len(), 3);
}

#[test]
fn unknown_flag_is_usage_error() {
    let o = run(&["gen-data", "--frobnicate"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn missing_bundle_reports_path() {
    let o = run(&["train-kaa", "--bundle", "/no/such/bundle", "--out", "/tmp/unused-kaa-out"]);
    assert!(!o.status.success());
    let stderr = String::from_utf8(o.stderr).unwrap();
    let last = stderr.lines().last().unwrap();
    let v: serde_json::Value = serde_json::from_str(last).unwrap();
    assert_eq!(v["error"], "io");
    assert!(v["message"].as_str().unwrap().contains("/no/such/bundle"));
}

#[test]
fn bad_config_is_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("bad.json");
    std::fs::write(&p, r#"{"cal": {"kappa": 0}}"#).unwrap();
    let o = run(&["gen-data", "--config", s(&p), "--out", s(dir.path())]);
    assert_eq!(o.status.code(), Some(1));
    let v: serde_json::Value = serde_json::from_slice(&o.stderr).unwrap();
    assert_eq!(v["error"], "config");
}

#[test]
fn grad_check_reports_error() {
    let out = ok(&["grad-check", "--precision", "f64", "--seed", "0"]);
    assert!(out.starts_with("max relative error "), "{out}");
}
