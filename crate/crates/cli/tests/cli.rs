use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use rfe3d::config::Config;

fn rfe3d(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rfe3d")).current_dir(dir).args(args).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

/// The tiny preset as a config file, with `extra` appended.
fn tiny_config(dir: &Path, extra: &str) -> String {
    let path = dir.join("tiny.cfg");
    fs::write(&path, format!("{}{extra}", Config::tiny().to_text())).unwrap();
    path.to_str().unwrap().to_string()
}

#[test]
fn gen_scenes_is_deterministic_and_count_zero_writes_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path(), "");
    for out in ["a", "b"] {
        assert!(rfe3d(dir.path(), &["gen-scenes", "--config", &cfg, "--seed", "9", "--count", "2", "--out", out])
            .status
            .success());
    }
    for name in ["scene_00000.json", "scene_00001.json"] {
        assert_eq!(fs::read(dir.path().join("a").join(name)).unwrap(), fs::read(dir.path().join("b").join(name)).unwrap());
    }
    assert!(rfe3d(dir.path(), &["gen-scenes", "--config", &cfg, "--count", "0", "--out", "empty"]).status.success());
    assert_eq!(fs::read_dir(dir.path().join("empty")).unwrap().count(), 0);
}

#[test]
fn train_resume_and_eval_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = tiny_config(d, "train.steps = 3\n");
    assert!(rfe3d(d, &["gen-scenes", "--config", &cfg, "--count", "2", "--out", "scenes"]).status.success());
    let first = rfe3d(d, &["train", "--config", &cfg, "--scenes", "scenes", "--out", "run"]);
    assert!(first.status.success(), "{}", String::from_utf8_lossy(&first.stderr));
    for f in ["trace.csv", "checkpoint.json", "config.txt"] {
        assert!(d.join("run").join(f).exists(), "{f} missing");
    }
    let more = tiny_config(d, "train.steps = 5\n");
    let resumed =
        rfe3d(d, &["train", "--config", &more, "--scenes", "scenes", "--out", "run", "--resume", "run/checkpoint.json"]);
    assert!(resumed.status.success());
    let trace = fs::read_to_string(d.join("run/trace.csv")).unwrap();
    let steps: Vec<&str> = trace.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(steps, ["0", "1", "2", "3", "4"]);

    let eval = rfe3d(d, &["eval", "--config", &more, "--scenes", "scenes", "--checkpoint", "run/checkpoint.json", "--out", "ev"]);
    assert!(eval.status.success(), "{}", String::from_utf8_lossy(&eval.stderr));
    assert!(stdout(&eval).contains("AP40 car"));
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(d.join("ev/eval.json")).unwrap()).unwrap();
    assert!(report["mean_iou_refined"].as_f64().unwrap().is_finite());
    let again =
        rfe3d(d, &["eval", "--config", &more, "--scenes", "scenes", "--checkpoint", "run/checkpoint.json", "--out", "ev2"]);
    assert_eq!(fs::read(d.join("ev/eval.json")).unwrap(), fs::read(d.join("ev2/eval.json")).unwrap());
    assert!(again.status.success());
}

#[test]
fn gradcheck_passes_and_reports_every_group() {
    let dir = tempfile::tempdir().unwrap();
    let out = rfe3d(dir.path(), &["gradcheck", "--out", "g"]);
    assert!(out.status.success(), "{}", stdout(&out));
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("g/gradcheck.json")).unwrap()).unwrap();
    for group in ["aux", "encoder", "head", "rfe", "tensor"] {
        assert!(report["groups"][group]["max_rel_err"].as_f64().unwrap() < 1e-4, "{group}");
    }
}

#[test]
fn bench_writes_one_row_per_case() {
    let dir = tempfile::tempdir().unwrap();
    let cfg =
        tiny_config(dir.path(), "bench.rois = 2,4\nbench.budgets = 8\nbench.d_a = 8\nbench.hidden = 8\nbench.repetitions = 1\n");
    assert!(rfe3d(dir.path(), &["bench", "--config", &cfg, "--out", "b"]).status.success());
    let csv = fs::read_to_string(dir.path().join("b/bench.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 2 * 2);
    assert!(csv.lines().skip(1).all(|l| l.ends_with(",true")));
}

#[test]
fn ablate_reports_each_seed() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = tiny_config(d, "train.steps = 2\n");
    assert!(rfe3d(d, &["gen-scenes", "--config", &cfg, "--count", "1", "--out", "scenes"]).status.success());
    let out = rfe3d(d, &["ablate", "--config", &cfg, "--scenes", "scenes", "--seeds", "3,4", "--out", "ab"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(d.join("ab/ablation.json")).unwrap()).unwrap();
    assert_eq!(report["rows"].as_array().unwrap().len(), 2);
}

#[test]
fn contract_errors_exit_nonzero() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(d.join("bad.cfg"), "no.such.key = 1\n").unwrap();
    let bad_key = rfe3d(d, &["gen-scenes", "--config", "bad.cfg"]);
    assert!(!bad_key.status.success());
    assert!(String::from_utf8_lossy(&bad_key.stderr).contains("no.such.key"));

    fs::write(d.join("bad.cfg"), "rfe.d_a = 0\n").unwrap();
    assert!(!rfe3d(d, &["gen-scenes", "--config", "bad.cfg"]).status.success());

    let missing = rfe3d(d, &["train", "--scenes", "missing"]);
    assert!(!missing.status.success());
    assert!(String::from_utf8_lossy(&missing.stderr).contains("missing"));

    fs::create_dir(d.join("none")).unwrap();
    assert!(!rfe3d(d, &["train", "--scenes", "none"]).status.success());

    let cfg = tiny_config(d, "");
    assert!(rfe3d(d, &["gen-scenes", "--config", &cfg, "--count", "1", "--out", "s"]).status.success());
    fs::write(d.join("ckpt.json"), "{}").unwrap();
    assert!(!rfe3d(d, &["eval", "--config", &cfg, "--scenes", "s", "--checkpoint", "ckpt.json"]).status.success());
}
