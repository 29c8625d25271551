use std::path::Path;
use std::process::{Command, Output};

use serde_json::json;

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_seqdistill"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn write(dir: &Path, name: &str, doc: serde_json::Value) -> String {
    let p = dir.join(name);
    std::fs::write(&p, doc.to_string()).unwrap();
    p.to_str().unwrap().to_string()
}

fn small() -> serde_json::Value {
    json!({
        "seed": 2,
        "data": {
            "target": "domain_1.tsv",
            "synthetic": {"num_domains": 2, "users_per_domain": 60, "items_per_domain": 30, "item_pool": 40}
        },
        "model": {"embedding_dim": 4, "layers": 1, "max_len": 6},
        "optim": {"epochs": 2},
        "distill": {"batch_size": 32}
    })
}

#[test]
fn errors_are_single_line_and_nonzero() {
    let dir = tempfile::tempdir().unwrap();
    let mut doc = small();
    doc["distill"]["temprature"] = json!(0.3);
    let cfg = write(dir.path(), "typo.json", doc);
    let out = run(&["train", "--config", &cfg, "--out", dir.path().to_str().unwrap()]);
    assert!(!out.status.success());
    let stderr = String::from_utf8(out.stderr).unwrap();
    assert_eq!(stderr.lines().count(), 1, "{stderr}");
    assert!(stderr.starts_with("error: "));
    assert!(stderr.contains("distill.temprature"));

    let out = run(&["evaluate", "--config", &dir.path().join("absent.json").to_string_lossy(), "--checkpoint", "x"]);
    assert!(!out.status.success());
    assert_eq!(String::from_utf8(out.stderr).unwrap().lines().count(), 1);
}

#[test]
fn train_overrides_take_precedence() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "run.json", small());
    assert!(run(&["gen-data", "--config", &cfg, "--seed", "8"]).status.success());
    let out_dir = dir.path().join("run");
    let out = run(&[
        "train",
        "--config",
        &cfg,
        "--out",
        out_dir.to_str().unwrap(),
        "--override",
        "optim.epochs=1",
        "--override",
        "curriculum.enabled=false",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let log = std::fs::read_to_string(out_dir.join("metrics.tsv")).unwrap();
    assert_eq!(log.lines().count(), 1);
    let resolved: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out_dir.join("config.json")).unwrap()).unwrap();
    assert_eq!(resolved["optim"]["epochs"], 1);
    assert_eq!(resolved["curriculum"]["enabled"], false);

    let bad = run(&["train", "--config", &cfg, "--out", out_dir.to_str().unwrap(), "--override", "distill.temperature=0"]);
    assert!(!bad.status.success());
    assert!(String::from_utf8_lossy(&bad.stderr).contains("distill.temperature"));
}

#[test]
fn evaluate_prints_metrics_json() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "run.json", small());
    assert!(run(&["gen-data", "--config", &cfg]).status.success());
    let out_dir = dir.path().join("run");
    assert!(run(&["train", "--config", &cfg, "--out", out_dir.to_str().unwrap()]).status.success());
    let out = run(&["evaluate", "--config", &cfg, "--checkpoint", out_dir.join("student.ckpt").to_str().unwrap()]);
    assert!(out.status.success());
    let report: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    for key in ["recall@5", "ndcg@10", "recall@20", "users"] {
        assert!(report.get(key).is_some(), "missing {key}");
    }
}

#[test]
fn subcommands_are_listed() {
    let help = String::from_utf8(run(&["--help"]).stdout).unwrap();
    for cmd in ["gen-data", "pretrain-teacher", "export-teacher", "train", "evaluate", "sweep"] {
        assert!(help.contains(cmd), "{cmd} missing from help");
    }
}

#[test]
fn bundled_configs_parse() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut seen = 0;
    for entry in std::fs::read_dir(&dir).unwrap() {
        let path = entry.unwrap().path();
        if path.extension().is_some_and(|e| e == "json") {
            seqdistill_core::config::load_config(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
            seen += 1;
        }
    }
    assert!(seen >= 4);
}
