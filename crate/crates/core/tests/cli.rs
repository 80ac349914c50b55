//! End-to-end pipeline through the compiled binary: gen-data →
//! train-teacher → distill → dump-features → cka, plus exit-code contracts.

use std::path::Path;
use std::process::Command;

fn ofakd() -> Command {
    Command::new(env!("CARGO_BIN_EXE_ofakd"))
}

fn run_ok(args: &[&str]) {
    let out = ofakd().args(args).output().unwrap();
    assert!(
        out.status.success(),
        "ofakd {args:?} failed:\n{}{}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

#[test]
fn full_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let base = dir.path();
    let spec = base.join("spec.json");
    std::fs::write(
        &spec,
        r#"{"class_count":4,"train_per_class":16,"test_per_class":8,"height":16,"width":16,
            "texture_scale":4.0,"shape_vocabulary":[0,1,2,3],"noise_std":0.03,"seed":3}"#,
    )
    .unwrap();
    let s = |p: &Path| p.to_str().unwrap().to_string();
    let data = s(&base.join("data"));
    run_ok(&["gen-data", "--spec", &s(&spec), "--out", &data]);
    assert!(base.join("data/train.ofad").exists());

    let teacher = s(&base.join("teacher"));
    run_ok(&[
        "train-teacher", "--data", &data, "--out", &teacher, "--family", "vit",
        "--class-count", "4", "--epochs", "1", "--seed", "1",
    ]);
    assert!(base.join("teacher/checkpoint/manifest.json").exists());
    let metrics = std::fs::read_to_string(base.join("teacher/metrics.jsonl")).unwrap();
    let row: serde_json::Value = serde_json::from_str(metrics.lines().next().unwrap()).unwrap();
    for key in ["epoch", "train_loss", "test_acc", "exit_losses", "grad_scale_min"] {
        assert!(row.get(key).is_some(), "metrics row missing {key}");
    }

    let student = s(&base.join("student"));
    run_ok(&[
        "distill", "--data", &data, "--out", &student,
        "--teacher-ckpt", &s(&base.join("teacher/checkpoint")),
        "--class-count", "4", "--epochs", "1", "--seed", "2",
        "--branches", "1,2,3,4", "--gamma", "1.2",
    ]);
    assert!(base.join("student/checkpoint/manifest.json").exists());

    for (ckpt, out) in [("teacher", "feats-t"), ("student", "feats-s")] {
        run_ok(&[
            "dump-features", "--ckpt", &s(&base.join(ckpt).join("checkpoint")),
            "--data", &data, "--out", &s(&base.join(out)), "--samples", "16", "--seed", "5",
        ]);
        assert!(base.join(out).join("stage3.oft").exists());
    }

    let heatmap = base.join("cka.csv");
    run_ok(&[
        "cka", "--model-a", &s(&base.join("feats-t")), "--model-b", &s(&base.join("feats-s")),
        "--out", &s(&heatmap), "--seed", "5",
    ]);
    let csv = std::fs::read_to_string(&heatmap).unwrap();
    assert!(csv.starts_with("layer,"), "unexpected csv header: {csv}");
    assert_eq!(csv.lines().count(), 5, "expected 4 stage rows plus header");
    let summary: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(heatmap.with_extension("json")).unwrap())
            .unwrap();
    assert!(summary.get("matched_stages").is_some());
}

#[test]
fn missing_teacher_is_a_validation_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = ofakd()
        .args([
            "distill",
            "--data", dir.path().to_str().unwrap(),
            "--out", dir.path().join("x").to_str().unwrap(),
            "--teacher-ckpt", "/nonexistent/checkpoint",
        ])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("error:"), "stderr: {err}");
}

#[test]
fn bad_flag_exits_one_and_help_exits_zero() {
    let out = ofakd().arg("--definitely-not-a-flag").output().unwrap();
    assert_eq!(out.status.code(), Some(1));
    let out = ofakd().arg("--help").output().unwrap();
    assert_eq!(out.status.code(), Some(0));
}
