use std::path::Path;
use std::process::{Command, Output};

fn lognet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lognet")).args(args).env_remove("LOGNET_SEED").output().unwrap()
}

fn ok(out: &Output) -> String {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn small_dataset(dir: &Path) {
    ok(&lognet(&["generate-data", "--out", p(dir), "--train", "48", "--val", "16", "--test", "8", "--seed", "3"]));
}

#[test]
fn generate_data_is_reproducible_and_audited() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    small_dataset(&a);
    small_dataset(&b);
    for f in ["train.jsonl", "val.jsonl", "test.jsonl", "audit.json", "dataset.json"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f}");
    }
    let audit: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(a.join("audit.json")).unwrap()).unwrap();
    assert!(audit["train"]["majority_rate"].as_f64().unwrap() <= 0.35);
    let manifest: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(a.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["command"], "generate-data");
    assert_eq!(manifest["seed"], 3);
    let first = std::fs::read_to_string(a.join("train.jsonl")).unwrap();
    let line: serde_json::Value = serde_json::from_str(first.lines().next().unwrap()).unwrap();
    for key in ["scene", "question_tokens", "question_text", "answer", "type"] {
        assert!(line.get(key).is_some(), "missing {key}");
    }
}

#[test]
fn exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let bad = lognet(&["generate-data", "--out", p(tmp.path()), "--n-objects", "9-5"]);
    assert_eq!(bad.status.code(), Some(1));
    let file = tmp.path().join("file");
    std::fs::write(&file, "x").unwrap();
    let unwritable = lognet(&["generate-data", "--out", p(&file.join("sub")), "--train", "4"]);
    assert_eq!(unwritable.status.code(), Some(3));
    assert_eq!(lognet(&["train", "--bogus"]).status.code(), Some(1));
    let missing = lognet(&["eval", "--checkpoint", p(&tmp.path().join("none.logk")), "--data", p(tmp.path())]);
    assert_eq!(missing.status.code(), Some(3));
}

#[test]
fn gradcheck_passes() {
    let out = lognet(&["gradcheck"]);
    let text = ok(&out);
    assert!(text.contains("PASS"));
}

#[test]
fn train_eval_inspect_resume() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    small_dataset(&data);
    let run = tmp.path().join("run");
    let cfg = tmp.path().join("cfg.json");
    std::fs::write(&cfg, r#"{"train": {"epochs": 5, "learning_rate": 0.002}, "model": {"steps": 3}}"#).unwrap();
    let common = ["--data", p(&data), "--out", p(&run), "--preset", "tiny", "--config", p(&cfg)];
    let mut args = vec!["train"];
    args.extend(common);
    args.extend(["--epochs", "1"]);
    ok(&lognet(&args));
    for f in ["model.logk", "last.logk", "metrics.csv", "manifest.json"] {
        assert!(run.join(f).exists(), "{f}");
    }
    let manifest: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(run.join("manifest.json")).unwrap()).unwrap();
    // flag beats file, file beats default
    assert_eq!(manifest["config"]["train"]["epochs"], 1);
    assert_eq!(manifest["config"]["train"]["learning_rate"], 0.002);
    assert_eq!(manifest["config"]["model"]["steps"], 3);

    let last = run.join("last.logk");
    ok(&lognet(&["train", "--data", p(&data), "--out", p(&run), "--resume", p(&last), "--epochs", "2"]));
    let metrics = std::fs::read_to_string(run.join("metrics.csv")).unwrap();
    assert!(metrics.lines().any(|l| l.starts_with("1,val,all")));
    assert!(metrics.lines().any(|l| l.starts_with("2,val,all")));

    let model = run.join("model.logk");
    let e1 = ok(&lognet(&["eval", "--checkpoint", p(&model), "--data", p(&data), "--split", "test"]));
    let e2 = ok(&lognet(&["eval", "--checkpoint", p(&model), "--data", p(&data), "--split", "test"]));
    assert_eq!(e1, e2);
    assert!(e1.contains("majority baseline"));

    let traces = tmp.path().join("traces");
    let out = ok(&lognet(&[
        "inspect", "--checkpoint", p(&model), "--data", p(&data), "--sample-id", "0,3", "--out", p(&traces),
    ]));
    assert!(out.contains("binding sharpness"));
    let files = std::fs::read_dir(&traces).unwrap().count();
    assert_eq!(files, 2 * 3 * 2 + 1, "two samples, three steps, json+dot, manifest");
    let bad = lognet(&["inspect", "--checkpoint", p(&model), "--data", p(&data), "--sample-id", "99", "--out", p(&traces)]);
    assert_eq!(bad.status.code(), Some(1));
}

#[test]
fn steps_sweep_and_seed_env() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    small_dataset(&data);
    let out = tmp.path().join("sweep");
    let status = Command::new(env!("CARGO_BIN_EXE_lognet"))
        .args(["train", "--data", p(&data), "--out", p(&out), "--preset", "tiny", "--epochs", "1", "--steps", "1,2"])
        .env("LOGNET_SEED", "17")
        .output()
        .unwrap();
    ok(&status);
    for t in ["T1", "T2"] {
        let m: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(out.join(t).join("manifest.json")).unwrap()).unwrap();
        assert_eq!(m["seed"], 17);
    }
}

#[test]
fn ablate_writes_reports() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    small_dataset(&data);
    let out = tmp.path().join("abl");
    let text = ok(&lognet(&[
        "ablate", "--data", p(&data), "--out", p(&out), "--preset", "tiny", "--epochs", "1", "--seeds", "0",
        "--protocol", "trends",
    ]));
    assert!(text.contains("| configuration |"));
    for f in ["report.md", "report.csv", "report.json", "manifest.json"] {
        assert!(out.join(f).exists(), "{f}");
    }
    assert!(std::fs::read_dir(out.join("manifests")).unwrap().count() >= 6);
}
