use std::path::Path;
use std::process::{Command, Output};

use hocloud::config::RunConfig;

const BIN: &str = env!("CARGO_BIN_EXE_hocloud");

fn run(args: &[&str]) -> Output {
    Command::new(BIN).args(args).output().expect("spawn hocloud")
}

fn dir_snapshot(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(dir).unwrap().to_string_lossy().into_owned();
                files.push((rel, std::fs::read(&p).unwrap()));
            }
        }
    }
    files.sort();
    files
}

fn toy_config(dir: &Path) -> String {
    let mut cfg = RunConfig::toy();
    cfg.steps = 2;
    cfg.batch_size = 1;
    let path = dir.join("config.json");
    cfg.save(&path).unwrap();
    path.to_string_lossy().into_owned()
}

#[test]
fn synth_is_deterministic_across_invocations() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = toy_config(tmp.path());
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    for out in [&a, &b] {
        let o = run(&[
            "synth", "--config", &cfg, "--out", &out.to_string_lossy(),
            "--count", "2", "--seed", "1",
        ]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    assert_eq!(dir_snapshot(&a), dir_snapshot(&b));
}

#[test]
fn train_eval_infer_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = toy_config(tmp.path());
    let data = tmp.path().join("data");
    let o = run(&[
        "synth", "--config", &cfg, "--out", &data.to_string_lossy(),
        "--count", "2", "--seed", "7",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));

    let out = tmp.path().join("run");
    let o = run(&["train", "--config", &cfg, "--data", &data.to_string_lossy(), "--out", &out.to_string_lossy()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let ckpt = out.join("checkpoint.tnc");
    assert!(ckpt.exists());
    assert!(out.join("train_log.jsonl").exists());

    let report = tmp.path().join("report.json");
    let o = run(&[
        "eval", "--ckpt", &ckpt.to_string_lossy(), "--data", &data.to_string_lossy(),
        "--report", &report.to_string_lossy(), "--eval-points", "64",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let doc: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(doc["rows"].as_array().unwrap().len(), 2);

    let pred = tmp.path().join("pred");
    let o = run(&[
        "infer", "--ckpt", &ckpt.to_string_lossy(),
        "--sample", &data.join("sample_00000").to_string_lossy(),
        "--out", &pred.to_string_lossy(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(pred.join("sparse.ply").exists());
    assert!(pred.join("dense.ply").exists());
}

#[test]
fn gradcheck_exit_codes() {
    let o = run(&["gradcheck", "--ops", "add,gelu,layer_norm,corruptible"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stdout));
    let text = String::from_utf8_lossy(&o.stdout).into_owned();
    assert_eq!(text.lines().count(), 4);
    assert!(text.lines().all(|l| l.ends_with("ok")));

    let o = run(&["gradcheck", "--ops", "corruptible", "--corrupt"]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stdout).contains("FAIL"));
}

#[test]
fn bad_inputs_fail_cleanly() {
    let tmp = tempfile::tempdir().unwrap();
    let o = run(&["train", "--data", &tmp.path().join("nope").to_string_lossy(), "--out", &tmp.path().join("out").to_string_lossy()]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).starts_with("error:"));

    let o = run(&["gradcheck", "--ops", "not_an_op"]);
    assert!(!o.status.success());
}
