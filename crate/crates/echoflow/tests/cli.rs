//! End-to-end runs of the installed binary: pipeline, determinism, exit
//! codes.

use std::path::Path;
use std::process::{Command, Output};

fn echoflow(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_echoflow"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn assert_ok(out: &Output) {
    assert!(
        out.status.success(),
        "stdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn path_str(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn write_tiny_config(dir: &Path) -> std::path::PathBuf {
    let path = dir.join("config.json");
    std::fs::write(&path, r#"{"steps": 2, "provider": "dense-grid"}"#).unwrap();
    path
}

#[test]
fn pipeline_runs_and_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let gt = dir.path().join("gt");
    assert_ok(&echoflow(&["phantom", "--out", path_str(&gt)]));
    assert!(gt.join("frame_0009.png").exists());
    assert!(gt.join("mask_0009.png").exists());

    let config = write_tiny_config(dir.path());
    let m0 = gt.join("mask_0000.png");
    let m1 = gt.join("mask_0009.png");
    let fit_args = |out: &Path| {
        vec![
            "fit".to_string(),
            "--seq".into(),
            path_str(&gt).into(),
            "--m0".into(),
            path_str(&m0).into(),
            "--m1".into(),
            path_str(&m1).into(),
            "--config".into(),
            path_str(&config).into(),
            "--out".into(),
            path_str(out).into(),
        ]
    };
    let fit_a = dir.path().join("fit_a");
    let fit_b = dir.path().join("fit_b");
    for out in [&fit_a, &fit_b] {
        let args: Vec<String> = fit_args(out);
        let strs: Vec<&str> = args.iter().map(String::as_str).collect();
        assert_ok(&echoflow(&strs));
    }
    for name in ["mask_0005.png", "fields.eodf", "loss.csv", "report.json"] {
        let a = std::fs::read(fit_a.join(name)).unwrap();
        let b = std::fs::read(fit_b.join(name)).unwrap();
        assert_eq!(a, b, "{name} differs between identical runs");
    }

    let report = dir.path().join("report.json");
    let out = echoflow(&[
        "eval",
        "--pred",
        path_str(&fit_a),
        "--gt",
        path_str(&gt),
        "--spacing",
        "0.3",
        "--tau",
        "0.15",
        "--out",
        path_str(&report),
    ]);
    assert_ok(&out);
    let json: serde_json::Value =
        serde_json::from_slice(&std::fs::read(&report).unwrap()).unwrap();
    assert!(json["mean_dice"]["1"].as_f64().unwrap() > 0.5);

    let ovl = dir.path().join("ovl");
    assert_ok(&echoflow(&[
        "overlay",
        "--seq",
        path_str(&gt),
        "--masks",
        path_str(&fit_a),
        "--out",
        path_str(&ovl),
    ]));
    assert!(ovl.join("overlay_0009.png").exists());
}

#[test]
fn missing_sequence_exits_one_and_names_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let out = echoflow(&[
        "fit",
        "--seq",
        "/definitely/not/here",
        "--m0",
        "x.png",
        "--m1",
        "y.png",
        "--out",
        path_str(&dir.path().join("o")),
    ]);
    assert_eq!(out.status.code(), Some(1));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("/definitely/not/here"), "{stderr}");
}

#[test]
fn unknown_flags_print_usage_and_exit_one() {
    let out = echoflow(&["fit", "--bogus"]);
    assert_eq!(out.status.code(), Some(1));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("Usage"), "{stderr}");

    let out = echoflow(&["--help"]);
    assert_eq!(out.status.code(), Some(0));
}

#[test]
fn gradcheck_reports_max_error_below_tolerance() {
    let out = echoflow(&["gradcheck", "--tolerance", "1e-4"]);
    assert_ok(&out);
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("max relative error"), "{stdout}");

    // An absurd tolerance turns the same run into a numerical failure.
    let out = echoflow(&["gradcheck", "--tolerance", "1e-300"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn corrupt_labels_are_rejected_with_file_and_value() {
    let dir = tempfile::tempdir().unwrap();
    let gt = dir.path().join("gt");
    assert_ok(&echoflow(&["phantom", "--out", path_str(&gt)]));
    let bad = image::GrayImage::from_raw(64, 64, vec![7u8; 64 * 64]).unwrap();
    bad.save(gt.join("mask_0003.png")).unwrap();
    let out = echoflow(&[
        "eval",
        "--pred",
        path_str(&gt),
        "--gt",
        path_str(&gt),
        "--out",
        path_str(&dir.path().join("r.json")),
    ]);
    assert_eq!(out.status.code(), Some(1));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("mask_0003.png") && stderr.contains("label 7"), "{stderr}");
}
