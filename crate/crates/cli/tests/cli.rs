use std::path::Path;
use std::process::{Command, Output};

fn flamingo(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_flamingo"))
        .args(args)
        .current_dir(cwd)
        .env_remove("FLAMINGO_OUT")
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) {
    assert!(
        out.status.success(),
        "status {:?}\nstdout:\n{}\nstderr:\n{}",
        out.status,
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

#[test]
fn usage_errors_exit_with_code_two() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(flamingo(&["no-such-command"], dir.path()).status.code(), Some(2));
    let out = flamingo(&["train", "--set", "train.stepz=3", "--out", "o"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("stepz"));
    let out = flamingo(&["train", "--set", "model.lm.heads=5", "--out", "o"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    let out = flamingo(&["train", "--preset", "huge", "--out", "o"], dir.path());
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn runtime_errors_exit_with_code_one() {
    let dir = tempfile::tempdir().unwrap();
    let out = flamingo(
        &["eval", "--checkpoint", "missing.ckpt", "--task", "synthetic:color", "--out", "o"],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("missing.ckpt"));
    let out = flamingo(
        &["train", "--set", "train.pretrain_lm=false", "--steps", "1", "--out", "o"],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("missing checkpoint"));
}

#[test]
fn selftest_passes() {
    let dir = tempfile::tempdir().unwrap();
    let out = flamingo(&["selftest", "--seed", "3"], dir.path());
    ok(&out);
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.lines().count() >= 4);
    assert!(text.lines().all(|l| l.starts_with("PASS")), "{text}");
}

#[test]
fn pipeline_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(&flamingo(&["pretrain-lm", "--steps", "3", "--out", "lm"], d));
    assert!(d.join("lm/lm.ckpt").exists());
    ok(&flamingo(&["pretrain-contrastive", "--steps", "3", "--out", "c"], d));
    for f in ["vision.ckpt", "recall.csv", "zero_shot.csv", "report.json", "metrics.csv"] {
        assert!(d.join("c").join(f).exists(), "{f}");
    }
    let train = |out: &str| {
        flamingo(
            &[
                "train",
                "--steps",
                "3",
                "--lm-checkpoint",
                "lm/lm.ckpt",
                "--vision-checkpoint",
                "c/vision.ckpt",
                "--out",
                out,
            ],
            d,
        )
    };
    ok(&train("t1"));
    ok(&train("t2"));
    let m1 = std::fs::read(d.join("t1/metrics.csv")).unwrap();
    assert_eq!(m1, std::fs::read(d.join("t2/metrics.csv")).unwrap());
    assert_eq!(String::from_utf8_lossy(&m1).lines().count(), 4);
    let resolved: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(d.join("t1/config.resolved.json")).unwrap()).unwrap();
    assert_eq!(resolved["train"]["steps"], 3);

    let out = flamingo(
        &[
            "eval",
            "--checkpoint",
            "t1/model.ckpt",
            "--task",
            "synthetic:color",
            "--shots",
            "2",
            "--set",
            "eval.decode={\"kind\":\"greedy\"}",
            "--out",
            "e",
        ],
        d,
    );
    ok(&out);
    let summary: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(summary["queries"], 100);
    let preds = std::fs::read_to_string(d.join("e/predictions.jsonl")).unwrap();
    assert_eq!(preds.lines().count(), 100);

    std::fs::write(
        d.join("prompt.json"),
        r#"{"support":[{"image":{"glyph":{"color":"red","shape":"circle","size":"small","seed":1}},"text":"a small red circle"}],
            "query":{"glyph":{"color":"blue","shape":"square","size":"large","seed":2}},"prefix":"a"}"#,
    )
    .unwrap();
    let out = flamingo(&["generate", "--checkpoint", "t1/model.ckpt", "--prompt", "prompt.json", "--out", "g"], d);
    ok(&out);
    let g: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!(g["prompt"].as_str().unwrap().starts_with("<BOS><image>a small red circle<EOC><image>a"));
}

#[test]
fn output_directory_from_environment() {
    let dir = tempfile::tempdir().unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_flamingo"))
        .args(["pretrain-lm", "--steps", "1"])
        .current_dir(dir.path())
        .env("FLAMINGO_OUT", "from_env")
        .output()
        .unwrap();
    ok(&out);
    assert!(dir.path().join("from_env/lm.ckpt").exists());
}
