use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn hinge(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hinge")).args(args).output().expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

const SMALL: &str = r#"{
  "data": { "n_train": 64, "n_test": 32, "height": 8, "width": 8 },
  "train": { "epochs": 3 },
  "finetune": { "epochs": 1, "lr": 0.005 },
  "compress": { "max_epochs": 2 },
  "seed": 5
}"#;

struct Work {
    dir: tempfile::TempDir,
}

impl Work {
    fn new() -> Self {
        let w = Work { dir: tempfile::tempdir().unwrap() };
        std::fs::write(w.path("cfg.json"), SMALL).unwrap();
        w
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn s(&self, name: &str) -> String {
        self.path(name).to_string_lossy().into_owned()
    }

    fn train(&self, out: &str) -> Output {
        hinge(&["train", "--config", &self.s("cfg.json"), "--out", &self.s(out)])
    }

    fn compress(&self, target: &str, out: &str, report: &str) -> Output {
        hinge(&[
            "compress",
            "--config",
            &self.s("cfg.json"),
            "--ckpt",
            &self.s("base.hngw"),
            "--target-ratio",
            target,
            "--out",
            &self.s(out),
            "--report",
            &self.s(report),
        ])
    }
}

fn read_json(p: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(p).unwrap()).unwrap()
}

fn schema() -> jsonschema::JSONSchema {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../schemas/compression_report.schema.json");
    jsonschema::JSONSchema::compile(&read_json(&path)).expect("schema compiles")
}

#[test]
fn config_errors_exit_with_usage_code() {
    let w = Work::new();
    let missing = hinge(&["train", "--config", &w.s("nope.json"), "--out", &w.s("x.hngw")]);
    assert_eq!(code(&missing), 2);
    std::fs::write(w.path("bad.json"), r#"{"trian": {}}"#).unwrap();
    let bad = hinge(&["train", "--config", &w.s("bad.json"), "--out", &w.s("x.hngw")]);
    assert_eq!(code(&bad), 2);
    assert_eq!(code(&hinge(&["train"])), 2);
}

#[test]
fn full_pipeline() {
    let w = Work::new();
    let t1 = w.train("base.hngw");
    assert_eq!(code(&t1), 0, "{}", String::from_utf8_lossy(&t1.stderr));
    assert!(w.path("base.hngw.metrics.json").exists());
    // progress lines are JSON on stderr
    let first = String::from_utf8_lossy(&t1.stderr).lines().next().unwrap().to_string();
    assert_eq!(serde_json::from_str::<Value>(&first).unwrap()["stage"], "train");

    assert_eq!(code(&w.train("again.hngw")), 0);
    assert_eq!(std::fs::read(w.path("base.hngw")).unwrap(), std::fs::read(w.path("again.hngw")).unwrap());
    assert_eq!(
        std::fs::read(w.path("base.hngw.metrics.json")).unwrap(),
        std::fs::read(w.path("again.hngw.metrics.json")).unwrap()
    );

    let c = w.compress("0.5", "small.hngw", "report.json");
    assert_eq!(code(&c), 0, "{}", String::from_utf8_lossy(&c.stderr));
    let report = read_json(&w.path("report.json"));
    let sch = schema();
    assert!(sch.is_valid(&report), "report does not match schema: {report}");
    let gamma = report["gamma"].as_f64().unwrap();
    assert!((gamma - 0.5).abs() <= 0.005 || !report["exact"].as_bool().unwrap(), "gamma {gamma}");
    assert!(report["equivalence_max_deviation"].as_f64().unwrap() <= 1e-9);

    let c2 = w.compress("0.5", "small2.hngw", "report2.json");
    assert_eq!(code(&c2), 0);
    assert_eq!(std::fs::read(w.path("small.hngw")).unwrap(), std::fs::read(w.path("small2.hngw")).unwrap());
    assert_eq!(std::fs::read(w.path("report.json")).unwrap(), std::fs::read(w.path("report2.json")).unwrap());

    let loose = w.compress("0.999", "loose.hngw", "loose.json");
    assert_eq!(code(&loose), 0);
    assert!(sch.is_valid(&read_json(&w.path("loose.json"))));

    let infeasible = w.compress("0.001", "tiny.hngw", "tiny.json");
    assert_eq!(code(&infeasible), 4);
    let tiny = read_json(&w.path("tiny.json"));
    assert!(sch.is_valid(&tiny));
    assert_eq!(tiny["feasible"], false);
    assert!(tiny["floor_ratio"].as_f64().unwrap() > 0.001);
    assert!(!w.path("tiny.hngw").exists());

    let cfg = w.s("cfg.json");
    let small = w.s("small.hngw");
    let base = w.s("base.hngw");
    let ft = hinge(&["finetune", "--config", &cfg, "--ckpt", &small, "--out", &w.s("ft.hngw"), "--distill", "--teacher", &base]);
    assert_eq!(code(&ft), 0, "{}", String::from_utf8_lossy(&ft.stderr));
    let fm = read_json(&w.path("ft.hngw.metrics.json"));
    assert!(fm["soft_term_convention"].is_string());

    let plain = hinge(&["finetune", "--config", &cfg, "--ckpt", &small, "--out", &w.s("ce.hngw")]);
    assert_eq!(code(&plain), 0);
    assert!(read_json(&w.path("ce.hngw.metrics.json")).get("soft_term_convention").is_none());

    let no_teacher = hinge(&["finetune", "--config", &cfg, "--ckpt", &small, "--out", &w.s("x.hngw"), "--distill"]);
    assert_eq!(code(&no_teacher), 2);

    let ev = hinge(&["evaluate", "--config", &cfg, "--ckpt", &small]);
    assert_eq!(code(&ev), 0);
    let metrics: Value = serde_json::from_slice(&ev.stdout).unwrap();
    assert!((metrics["test_accuracy"].as_f64().unwrap() - report["accuracy_after"].as_f64().unwrap()).abs() < 0.05);
}

#[test]
fn teacher_with_other_class_count_is_rejected() {
    let w = Work::new();
    assert_eq!(code(&w.train("base.hngw")), 0);
    std::fs::write(
        w.path("three.json"),
        r#"{"data": {"classes": 3, "n_train": 48, "n_test": 24, "height": 8, "width": 8}, "train": {"epochs": 1}}"#,
    )
    .unwrap();
    let t = hinge(&["train", "--config", &w.s("three.json"), "--out", &w.s("three.hngw")]);
    assert_eq!(code(&t), 0);
    let ft = hinge(&[
        "finetune",
        "--config",
        &w.s("cfg.json"),
        "--ckpt",
        &w.s("base.hngw"),
        "--out",
        &w.s("ft.hngw"),
        "--distill",
        "--teacher",
        &w.s("three.hngw"),
    ]);
    assert_eq!(code(&ft), 2);
}

#[test]
fn verify_suites() {
    let out = hinge(&["verify", "--prox"]);
    assert_eq!(code(&out), 0);
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.lines().any(|l| l.starts_with("PASS prox_l1 ")));
    assert!(text.lines().all(|l| l.starts_with("PASS")));

    let grad = hinge(&["verify", "--grad"]);
    assert_eq!(code(&grad), 0);
    for line in String::from_utf8_lossy(&grad.stdout).lines() {
        let dev: f64 = line.split("max_deviation=").nth(1).unwrap().split(' ').next().unwrap().parse().unwrap();
        assert!(dev <= 1e-4, "{line}");
    }
}
