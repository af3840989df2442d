//! End-to-end smoke test of the binary: synth, train, explain, evaluate,
//! report on a tiny dataset, plus exit-code checks for bad invocations.

use std::path::Path;
use std::process::Command;

fn cxgen(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_cxgen"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) {
    let out = cxgen(args);
    assert!(
        out.status.success(),
        "cxgen {:?} failed:\n{}",
        args,
        String::from_utf8_lossy(&out.stderr)
    );
}

fn first_png(dir: &Path) -> std::path::PathBuf {
    let mut files: Vec<_> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().map(|e| e == "png").unwrap_or(false))
        .collect();
    files.sort();
    files.into_iter().next().expect("at least one png")
}

#[test]
fn full_pipeline_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let p = |s: &str| dir.path().join(s).to_string_lossy().into_owned();

    ok(&["synth", "--out", &p("data"), "--n", "24", "--size", "32", "--seed", "1"]);
    assert!(dir.path().join("data/manifest.json").is_file());

    ok(&[
        "train", "--data", &p("data"), "--run", &p("run"), "--scheme", "integrated",
        "--epochs", "1",
    ]);
    let ckpt = p("run/best.ckpt");
    assert!(dir.path().join("run/metrics.csv").is_file());
    assert!(dir.path().join("run/config.snapshot").is_file());

    let input = first_png(&dir.path().join("data/test/positive"));
    ok(&["explain", "--ckpt", &ckpt, "--input", input.to_str().unwrap(), "--out", &p("exp")]);
    let stem = input.file_stem().unwrap().to_string_lossy();
    for suffix in ["_map.f32", "_cf.png", "_mask.png", ".json"] {
        assert!(
            dir.path().join("exp").join(format!("{stem}{suffix}")).is_file(),
            "missing {stem}{suffix}"
        );
    }

    ok(&["evaluate", "--ckpt", &ckpt, "--data", &p("data"), "--out", &p("eval")]);
    assert!(dir.path().join("eval/metrics.csv").is_file());
    let summary = std::fs::read_to_string(dir.path().join("eval/summary.txt")).unwrap();
    assert!(summary.contains("ncc"));

    ok(&[
        "report", "--ckpt", &ckpt, "--data", &p("data"), "--out", &p("rep"),
        "--max-panels", "2",
    ]);
    assert!(dir.path().join("rep/summary.txt").is_file());
}

#[test]
fn bad_inputs_use_distinct_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let p = |s: &str| dir.path().join(s).to_string_lossy().into_owned();

    // missing dataset root is an ingestion failure
    let out = cxgen(&["train", "--data", &p("nowhere"), "--run", &p("run"), "--scheme", "integrated"]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));

    // missing checkpoint
    let out = cxgen(&["evaluate", "--ckpt", &p("no.ckpt"), "--data", &p("nowhere"), "--out", &p("e")]);
    assert!(!out.status.success());

    // unknown device request
    let out = Command::new(env!("CARGO_BIN_EXE_cxgen"))
        .args(["synth", "--out", &p("d"), "--n", "10", "--size", "32"])
        .env("CXGEN_DEVICE", "cuda")
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("cpu"));
}
