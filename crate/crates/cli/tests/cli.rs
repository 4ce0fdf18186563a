//! Smoke tests for every subcommand: flag wiring, output files, exit codes,
//! and error messages. Models here use hidden size 64, the fastest size to
//! train; full-size behavior lives in the acceptance suite.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

fn work_dir() -> PathBuf {
    let dir = Path::new(env!("CARGO_TARGET_TMPDIR")).join("cli-smoke");
    fs::create_dir_all(&dir).expect("create smoke work dir");
    dir
}

fn nnsbox(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_nnsbox")).args(args).output().expect("spawn nnsbox")
}

fn expect_ok(args: &[&str]) -> String {
    let output = nnsbox(args);
    assert!(
        output.status.success(),
        "nnsbox {:?} failed:\nstdout: {}\nstderr: {}",
        args,
        String::from_utf8_lossy(&output.stdout),
        String::from_utf8_lossy(&output.stderr)
    );
    String::from_utf8(output.stdout).expect("utf8 stdout")
}

/// One hidden-64 model shared by the read-only commands.
fn smoke_model() -> &'static (PathBuf, PathBuf) {
    static MODEL: OnceLock<(PathBuf, PathBuf)> = OnceLock::new();
    MODEL.get_or_init(|| {
        let dir = work_dir();
        let float = dir.join("m64_float.json");
        let quant = dir.join("m64_q1.json");
        expect_ok(&["train", "--key", "0x25", "--hidden", "64", "--out", float.to_str().unwrap()]);
        expect_ok(&[
            "quantize",
            "--model",
            float.to_str().unwrap(),
            "--precision",
            "1",
            "--out",
            quant.to_str().unwrap(),
        ]);
        (float, quant)
    })
}

#[test]
fn train_writes_model_and_history() {
    let dir = work_dir();
    let out = dir.join("train_smoke.json");
    let history = dir.join("train_smoke.csv");
    let stdout = expect_ok(&[
        "train",
        "--key",
        "0x5A",
        "--hidden",
        "64",
        "--seed",
        "2",
        "--out",
        out.to_str().unwrap(),
        "--history",
        history.to_str().unwrap(),
    ]);
    assert!(stdout.contains("accuracy 1.0000"), "{stdout}");
    let json: serde_json::Value = serde_json::from_str(&fs::read_to_string(&out).unwrap()).unwrap();
    assert_eq!(json["topology"]["m"], 64);
    assert_eq!(json["key_byte"], 0x5A);
    assert!(json["precision_p"].is_null(), "float model carries no precision");
    let history = fs::read_to_string(&history).unwrap();
    assert!(history.starts_with("epoch,loss,accuracy\n"), "history header");
    assert!(history.lines().count() > 2);
}

#[test]
fn quantize_reports_exactness_and_widths() {
    let (_, quant) = smoke_model();
    let json: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(quant).unwrap()).unwrap();
    assert_eq!(json["precision_p"], 1);
    assert!(json["group_widths"]["w1"].as_u64().unwrap() >= 1);
    assert!(json["W1"][0].is_i64(), "quantized weights are integers");
}

#[test]
fn faults_strided_campaign_writes_report_and_csv() {
    let (_, quant) = smoke_model();
    let dir = work_dir();
    let out = dir.join("faults.json");
    let csv = dir.join("faults.csv");
    let stdout = expect_ok(&[
        "faults",
        "--model",
        quant.to_str().unwrap(),
        "--space",
        "range",
        "--site-stride",
        "101",
        "--out",
        out.to_str().unwrap(),
        "--per-site",
        csv.to_str().unwrap(),
    ]);
    assert!(stdout.contains("injection:"), "{stdout}");
    assert!(stdout.contains("oracle:"), "{stdout}");
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(&out).unwrap()).unwrap();
    assert_eq!(report["site_stride"], 101);
    assert_eq!(report["oracle_mismatches"], 0);
    let csv = fs::read_to_string(&csv).unwrap();
    assert!(csv.starts_with("group,i,j,faulty_pairs\n"), "per-site header: {csv}");
    let rows = csv.lines().count() - 1;
    assert_eq!(rows as u64, report["sites_evaluated"].as_u64().unwrap());
}

#[test]
fn margins_validate_agrees_on_stride_subset() {
    let (_, quant) = smoke_model();
    let stdout = expect_ok(&[
        "margins",
        "--model",
        quant.to_str().unwrap(),
        "--space",
        "full8",
        "--validate",
        "--site-stride",
        "97",
    ]);
    assert!(stdout.contains("0 disagreements"), "{stdout}");
}

#[test]
fn emulate_reports_decision_and_calibration() {
    let (_, quant) = smoke_model();
    let dir = work_dir();
    let trace_path = dir.join("trace.json");
    let stdout = expect_ok(&[
        "emulate",
        "--model",
        quant.to_str().unwrap(),
        "--input",
        "0x25",
        "--trace",
        trace_path.to_str().unwrap(),
    ]);
    assert!(stdout.contains("64 hidden iterations"), "{stdout}");
    assert!(stdout.contains("x 8 executions"), "{stdout}");
    let trace: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(&trace_path).unwrap()).unwrap();
    assert_eq!(trace["hidden_iterations"], 64);
    assert_eq!(trace["logits"].as_array().unwrap().len(), 256);

    let stdout = expect_ok(&["emulate", "--calibrate"]);
    assert!(stdout.contains("calibrated latencies"), "{stdout}");
    assert!(stdout.contains("residual"), "{stdout}");
}

#[test]
fn sweeps_write_tables() {
    let dir = work_dir();
    let precision_dir = dir.join("sweep_precision");
    fs::create_dir_all(&precision_dir).unwrap();
    let stdout = expect_ok(&[
        "sweep-precision",
        "--keys",
        "0x25",
        "--hidden-sizes",
        "64",
        "--precisions",
        "1,2",
        "--seeds",
        "1",
        "--out",
        precision_dir.to_str().unwrap(),
    ]);
    assert!(stdout.contains("8 rows"), "{stdout}");
    let csv = fs::read_to_string(precision_dir.join("sweep.csv")).unwrap();
    assert_eq!(csv.lines().count(), 9, "header + 2 cells x 4 groups: {csv}");

    let hidden_dir = dir.join("sweep_hidden");
    fs::create_dir_all(&hidden_dir).unwrap();
    let stdout = expect_ok(&[
        "sweep-hidden",
        "--keys",
        "0x25",
        "--hidden-sizes",
        "64",
        "--seeds",
        "1",
        "--out",
        hidden_dir.to_str().unwrap(),
    ]);
    assert!(stdout.contains("4 rows"), "{stdout}");
    assert!(hidden_dir.join("sweep.json").exists());
}

#[test]
fn search_compares_and_saves_both_models() {
    let dir = work_dir();
    let out = dir.join("search");
    fs::create_dir_all(&out).unwrap();
    let stdout = expect_ok(&[
        "search",
        "--key",
        "0x25",
        "--hidden",
        "64",
        "--lambdas",
        "1e-4",
        "--seeds",
        "1",
        "--sustain",
        "100",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(stdout.contains("baseline "), "{stdout}");
    assert!(stdout.contains("constrained "), "{stdout}");
    assert!(stdout.contains("improvement:"), "{stdout}");
    for file in ["baseline.json", "constrained.json", "constrained_float.json", "comparison.json"]
    {
        assert!(out.join(file).exists(), "missing {file}");
    }
    let comparison: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join("comparison.json")).unwrap()).unwrap();
    assert_eq!(comparison["validation_disagreements"], 0);
    assert_eq!(comparison["constrained"]["lambda"], 1e-4);
}

#[test]
fn report_bundles_artifacts() {
    let (_, quant) = smoke_model();
    let dir = work_dir();
    let campaign = dir.join("bundle_campaign.json");
    let margins = dir.join("bundle_margins.json");
    expect_ok(&[
        "faults",
        "--model",
        quant.to_str().unwrap(),
        "--space",
        "range",
        "--site-stride",
        "101",
        "--out",
        campaign.to_str().unwrap(),
    ]);
    expect_ok(&[
        "margins",
        "--model",
        quant.to_str().unwrap(),
        "--space",
        "range",
        "--out",
        margins.to_str().unwrap(),
    ]);
    let bundle_path = dir.join("bundle.json");
    for _ in 0..2 {
        expect_ok(&[
            "report",
            "--seeds",
            "1",
            "--campaign",
            campaign.to_str().unwrap(),
            "--margins",
            margins.to_str().unwrap(),
            "--with-calibration",
            "--out",
            bundle_path.to_str().unwrap(),
        ]);
    }
    let bundle: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(&bundle_path).unwrap()).unwrap();
    assert!(bundle["denominator"].is_u64());
    assert!(bundle["calibration"].is_object());
}

#[test]
fn bad_inputs_fail_with_messages() {
    let out = nnsbox(&["train", "--key", "0x1G", "--out", "/tmp/never.json"]);
    assert!(!out.status.success());
    let out = nnsbox(&["quantize", "--model", "/nonexistent.json", "--out", "/tmp/never.json"]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("nonexistent"), "error names the path: {err}");
    let out = nnsbox(&["margins", "--model", "/nonexistent.json", "--site-stride", "0"]);
    assert!(!out.status.success());
}
