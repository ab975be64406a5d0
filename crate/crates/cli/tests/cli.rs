use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn coretune(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_coretune")).args(args).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

/// Two separable classes in LIBSVM format.
fn libsvm(n: usize, offset: usize) -> String {
    let mut s = String::new();
    for i in 0..n {
        let k = i + offset;
        let label = k % 2;
        let a = if label == 0 { 0.2 } else { 0.8 } + (k % 7) as f64 * 0.01;
        let b = ((k * 37) % 11) as f64 / 11.0;
        writeln!(s, "{} 1:{a} 2:{b} 4:{}", label + 1, 1.0 - a).unwrap();
    }
    s
}

/// Writes a small experiment to `dir` and returns the config path.
fn experiment(dir: &Path) -> PathBuf {
    fs::write(dir.join("toy.tr"), libsvm(120, 0)).unwrap();
    fs::write(dir.join("toy.val"), libsvm(40, 1000)).unwrap();
    fs::write(dir.join("toy.t"), libsvm(40, 2000)).unwrap();
    let cfg = r#"{
        "dataset": {"train": "toy.tr", "validation": "toy.val", "test": "toy.t"},
        "space": {
            "lr": {"kind": "log_uniform", "lo": 0.01, "hi": 0.1},
            "h1": {"kind": "int_choice", "values": [4, 8]},
            "h2": {"kind": "int_choice", "values": [4]},
            "batch_size": {"kind": "int_choice", "values": [8, 16]}
        },
        "scheduler": {"kind": "hyperband", "eta": 3, "min_resource": 1, "max_resource": 6},
        "n_configs": 6,
        "strategy": {"kind": "gss", "fraction": 0.1},
        "epochs": 6,
        "selection_interval": 2,
        "seed": 1,
        "compare": {"strategies": ["gss", "random"], "fractions": "paper-fractions"}
    }"#;
    let path = dir.join("toy.json");
    fs::write(&path, cfg).unwrap();
    path
}

#[test]
fn missing_config_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let o = coretune(&["tune", "--config", "does/not/exist.json", "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(!String::from_utf8_lossy(&o.stderr).is_empty());
    assert!(!out.exists());
}

#[test]
fn invalid_override_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = experiment(dir.path());
    let o = coretune(&["tune", "--config", cfg.to_str().unwrap(), "--set", "strategy.fraction=1.5"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn unknown_verb_exits_2() {
    assert_eq!(coretune(&["frobnicate"]).status.code(), Some(2));
}

#[test]
fn unreadable_data_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = experiment(dir.path());
    fs::write(dir.path().join("toy.tr"), "1 1:x\n").unwrap();
    let o = coretune(&["tune", "--config", cfg.to_str().unwrap(), "--out", dir.path().join("o").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn tune_writes_artifacts_and_echoes_overrides() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = experiment(dir.path());
    let out = dir.path().join("run");
    let o = coretune(&[
        "tune",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
        "--set",
        "strategy.fraction=0.3",
        "--seed",
        "4",
        "--workers",
        "2",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(stdout(&o).lines().count(), 1);
    for f in ["report.json", "trials.csv", "trace.jsonl"] {
        assert!(out.join(f).is_file(), "{f} missing");
    }
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["config"]["strategy"]["fraction"], 0.3);
    assert_eq!(report["config"]["seed"], 4);
    assert_eq!(report["config"]["workers"], 2);

    let r = coretune(&["report", "--dir", out.to_str().unwrap()]);
    assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    assert!(stdout(&r).starts_with("gss f=0.3 trials=6 "), "{}", stdout(&r));
}

#[test]
fn compare_emits_one_row_per_run() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = experiment(dir.path());
    let out = dir.path().join("cmp");
    let o = coretune(&["compare", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let mut rdr = csv_rows(&out.join("scatter.csv"));
    assert_eq!(rdr.remove(0), vec!["strategy", "fraction", "speedup", "relative_test_error_pct"]);
    assert_eq!(rdr.len(), 1 + 4 * 2);
    assert_eq!(rdr[0][0], "full");
    assert_eq!(rdr[0][2].parse::<f64>().unwrap(), 1.0);
    assert!(out.join("full-1").join("report.json").is_file());
    assert!(out.join("gss-0.01").join("trials.csv").is_file());
}

fn csv_rows(path: &Path) -> Vec<Vec<String>> {
    fs::read_to_string(path).unwrap().lines().map(|l| l.split(',').map(str::to_string).collect()).collect()
}

#[test]
fn compare_without_block_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = experiment(dir.path());
    let text = fs::read_to_string(&cfg).unwrap();
    let v: serde_json::Value = serde_json::from_str(&text).unwrap();
    let mut v = v.as_object().unwrap().clone();
    v.remove("compare");
    fs::write(&cfg, serde_json::to_string(&v).unwrap()).unwrap();
    let o = coretune(&["compare", "--config", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn oracle_reports_every_suite() {
    let o = coretune(&["oracle", "--instances", "10"]);
    assert!(o.status.success(), "{}", stdout(&o));
    let lines: Vec<String> = stdout(&o).lines().map(str::to_string).collect();
    assert_eq!(lines.len(), 5);
    for (line, suite) in lines.iter().zip(["omp", "nnls", "hyperband", "asha", "gradient"]) {
        assert!(line.starts_with(&format!("PASS {suite} instances=10 ")), "{line}");
    }
}

#[test]
fn oracle_instance_count_and_seed_are_honoured() {
    let a = coretune(&["oracle", "--suite", "omp", "--instances", "200", "--seed", "7"]);
    let b = coretune(&["oracle", "--suite", "omp", "--instances", "200", "--seed", "7"]);
    let c = coretune(&["oracle", "--suite", "omp", "--instances", "200", "--seed", "8"]);
    assert!(a.status.success());
    assert!(stdout(&a).contains("instances=200 passed=200 "), "{}", stdout(&a));
    let fp = |o: &Output| stdout(o).split("fingerprint=").nth(1).unwrap().trim().to_string();
    assert_eq!(fp(&a), fp(&b));
    assert_ne!(fp(&a), fp(&c));
}
