use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

const TINY: &str = r#"{
  "scene": {"height": 32, "width": 32, "num_classes": 3, "band_fractions": [0.25, 0.25, 0.5]},
  "data": {"n_source": 4, "n_target": 4, "n_target_test": 2},
  "patch": {"patch_h": 8, "patch_w": 8},
  "modes": {"k": 4, "n_samples": 100},
  "train": {
    "k": 4, "warmup_iters": 2, "max_iters": 6, "eval_every": 3, "checkpoint_every": 3,
    "lr_g": 5e-5, "lambda_d": 0.5, "lambda_adv": 0.05,
    "g_widths": [4], "h_hidden": 8, "d_widths": [8, 1], "eval_source_images": 2
  }
}"#;

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_patchalign")).args(args).output().expect("spawn patchalign")
}

fn ok(args: &[&str]) -> String {
    let out = run(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn full_workflow_produces_every_artifact() {
    let tmp = TempDir::new().unwrap();
    let cfg = tmp.path().join("tiny.json");
    fs::write(&cfg, TINY).unwrap();
    let (data, modes, run_dir) = (tmp.path().join("data"), tmp.path().join("modes"), tmp.path().join("run"));

    ok(&["gen-data", "--config", s(&cfg), "--out", s(&data)]);
    for split in ["source_train", "target_train", "target_test"] {
        assert!(data.join(split).join("manifest.json").is_file(), "{split}");
    }
    assert!(data.join("resolved_config.json").is_file());

    ok(&["discover-modes", "--config", s(&cfg), "--data", s(&data), "--out", s(&modes)]);
    ok(&["train", "--config", s(&cfg), "--data", s(&data), "--modes", s(&modes), "--out", s(&run_dir)]);

    let log = fs::read_to_string(run_dir.join("log.csv")).unwrap();
    assert_eq!(log.lines().next(), Some("iter,l_s,l_d,gen_adv,l_d_disc,lr_g,lr_d"));
    assert_eq!(log.lines().count(), 1 + 6);
    let evals = fs::read_to_string(run_dir.join("eval.csv")).unwrap();
    assert_eq!(evals.lines().next(), Some("iter,split,class_id,iou,miou"));
    for name in ["iter_000003", "final"] {
        assert!(run_dir.join("checkpoints").join(name).join("checkpoint.json").is_file(), "{name}");
    }

    let ckpt = run_dir.join("checkpoints").join("final");
    let eval_dir = tmp.path().join("eval");
    let text = ok(&[
        "evaluate",
        "--checkpoint",
        s(&ckpt),
        "--data",
        s(&data),
        "--split",
        "target-test",
        "--out",
        s(&eval_dir),
    ]);
    assert!(text.contains("mIoU"));
    let rows = fs::read_to_string(eval_dir.join("eval.csv")).unwrap();
    assert_eq!(rows.lines().count(), 1 + 3);

    let features = tmp.path().join("features.csv");
    ok(&[
        "export-features",
        "--checkpoint",
        s(&ckpt),
        "--data",
        s(&data),
        "--split",
        "target-train",
        "--out",
        s(&features),
        "--limit",
        "2",
    ]);
    let csv = fs::read_to_string(&features).unwrap();
    assert_eq!(csv.lines().next(), Some("id,domain,u,v,f0,f1,f2,f3"));
    // two images of a 4x4 patch grid
    assert_eq!(csv.lines().count(), 1 + 2 * 16);
}

#[test]
fn same_seed_training_writes_identical_logs() {
    let tmp = TempDir::new().unwrap();
    let cfg = tmp.path().join("tiny.json");
    fs::write(&cfg, TINY).unwrap();
    let (data, modes) = (tmp.path().join("data"), tmp.path().join("modes"));
    ok(&["gen-data", "--config", s(&cfg), "--out", s(&data)]);
    ok(&["discover-modes", "--config", s(&cfg), "--data", s(&data), "--out", s(&modes)]);
    let logs: Vec<String> = ["a", "b"]
        .iter()
        .map(|name| {
            let out = tmp.path().join(name);
            ok(&[
                "train",
                "--config",
                s(&cfg),
                "--data",
                s(&data),
                "--modes",
                s(&modes),
                "--out",
                s(&out),
                "--seed",
                "7",
            ]);
            fs::read_to_string(out.join("log.csv")).unwrap()
        })
        .collect();
    assert_eq!(logs[0], logs[1]);
}

#[test]
fn config_errors_exit_with_two() {
    let tmp = TempDir::new().unwrap();
    for (name, text) in [
        ("negative.json", r#"{"train": {"lambda_d": -1}}"#),
        ("unknown.json", r#"{"train": {"lambda_q": 1}}"#),
        ("mismatch.json", r#"{"modes": {"k": 8}, "train": {"k": 9}}"#),
    ] {
        let path = tmp.path().join(name);
        fs::write(&path, text).unwrap();
        let out = run(&["gen-data", "--config", s(&path), "--out", s(&tmp.path().join("d"))]);
        assert_eq!(out.status.code(), Some(2), "{name}: {}", String::from_utf8_lossy(&out.stderr));
    }
    let out = run(&["gen-data", "--out", s(tmp.path())]);
    assert_eq!(out.status.code(), Some(0));
}

#[test]
fn io_errors_exit_with_three() {
    let tmp = TempDir::new().unwrap();
    let missing = tmp.path().join("missing.json");
    let out = run(&["gen-data", "--config", s(&missing), "--out", s(tmp.path())]);
    assert_eq!(out.status.code(), Some(3));

    let out = run(&["evaluate", "--checkpoint", s(&tmp.path().join("nope")), "--data", s(tmp.path())]);
    assert_eq!(out.status.code(), Some(3));

    let bad = tmp.path().join("bad.json");
    fs::write(&bad, "{,}").unwrap();
    let out = run(&["gen-data", "--config", s(&bad), "--out", s(tmp.path())]);
    assert_eq!(out.status.code(), Some(2));
}
