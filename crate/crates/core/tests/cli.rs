use std::path::Path;
use std::process::{Command, Output};

use acttransfer::harness::OUTPUT_ROOT_ENV;

fn acttransfer(root: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_acttransfer"))
        .args(args)
        .env(OUTPUT_ROOT_ENV, root)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(root: &Path, args: &[&str]) -> String {
    let out = acttransfer(root, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

#[test]
fn staged_pipeline_through_the_cli() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let p = |name: &str| root.join(name).to_string_lossy().into_owned();

    ok(root, &["gen-data", "--size", "6", "--demo", "--seed", "3"]);
    assert!(root.join("corpus/manifest.json").exists());
    ok(root, &["train-base", "--corpus", &p("corpus"), "--steps", "2"]);
    assert!(root.join("base.ckpt").exists() && root.join("base.loss.csv").exists());
    let prov = std::fs::read_to_string(root.join("base.provenance.json")).unwrap();
    assert!(prov.contains("corpus_manifest_sha256"));
    ok(root, &["train-refadapter", "--corpus", &p("corpus"), "--base", &p("base.ckpt"), "--steps", "2"]);
    ok(
        root,
        &["train-fae", "--base", &p("base.ckpt"), "--reference", &p("corpus/reference_zigzag.rgb"), "--prompt", "red square zigzag", "--steps", "2"],
    );
    let prov = std::fs::read_to_string(root.join("freq.provenance.json")).unwrap();
    assert!(prov.contains("\"adapter_loaded\": false"));
    ok(
        root,
        &[
            "infer", "--base", &p("base.ckpt"), "--adapter", &p("adapter.ckpt"), "--freq", &p("freq.ckpt"), "--target",
            &p("corpus/target.png"), "--prompt", "blue circle", "--steps", "3",
        ],
    );
    assert!(root.join("generated.rgb").exists() && root.join("generated.json").exists());
    let summary = ok(
        root,
        &["eval", "--generated", &p("generated.rgb"), "--reference", &p("corpus/reference_zigzag.rgb"), "--prompt", "blue circle"],
    );
    assert!(summary.contains("temporal"));
    let csv = std::fs::read_to_string(root.join("metrics.csv")).unwrap();
    assert_eq!(csv.lines().count(), 2);
    ok(
        root,
        &["attn-viz", "--base", &p("base.ckpt"), "--freq", &p("freq.ckpt"), "--reference", &p("corpus/reference_zigzag.rgb"), "--prompt", "red square", "--timesteps", "800,200", "--draws", "1"],
    );
    assert!(root.join("attn/attn_t0800.f64").exists());
    ok(root, &["schedule-dump", "--transition", "step-at-low"]);
    let dump = std::fs::read_to_string(root.join("schedule.csv")).unwrap();
    assert_eq!(dump.lines().count(), 1002);
}

#[test]
fn failures_use_categorised_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let missing = root.join("nope.ckpt").to_string_lossy().into_owned();

    let out = acttransfer(root, &["train-fae", "--base", &missing, "--reference", &missing, "--prompt", "red square", "--adapter", &missing]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("error[config]"));

    let out = acttransfer(root, &["infer", "--base", &missing, "--target", &missing, "--prompt", "blue circle"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error["));

    let out = acttransfer(root, &["schedule-dump", "--t-l", "100", "--t-h", "700"]);
    assert_eq!(out.status.code(), Some(2));

    let out = acttransfer(root, &["schedule-dump", "--transition", "linear"]);
    assert!(!out.status.success());
}
