use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sketchtucker")).args(args).output().expect("binary runs")
}

fn error_json(out: &Output) -> Value {
    let text = String::from_utf8_lossy(&out.stderr);
    let line = text.lines().rev().find(|l| l.starts_with('{')).unwrap_or_else(|| panic!("no JSON error in {text}"));
    serde_json::from_str(line).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn generate_then_decompose_file() {
    let dir = tempfile::tempdir().unwrap();
    let file = dir.path().join("x.srtt");
    let out = run(&["gen", "--shape", "9,8,7", "--rank", "3", "--seed", "4", "--out", p(&file)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));

    let out = run(&["tucker", "--method", "st-hosvd", "--input", p(&file), "--rank", "3"]);
    assert!(out.status.success());
    let report: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!(report["run"]["rel_error"].as_f64().unwrap() < 1e-12);
    assert_eq!(report["ranks"], serde_json::json!([3, 3, 3]));
}

#[test]
fn htucker_save_writes_container() {
    let dir = tempfile::tempdir().unwrap();
    let file = dir.path().join("h.srht");
    let out = run(&[
        "htucker", "--shape", "6^4", "--rank", "2", "--alpha", "5", "--workers", "2", "--save", p(&file),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let h = sketchtucker::htucker::load_htucker(&file).unwrap();
    assert_eq!(h.dims(), &[6, 6, 6, 6]);
}

#[test]
fn bench_csv_has_fixed_header_and_one_row_per_seed() {
    let out = run(&[
        "bench", "--method", "sub-r-hosvd", "--shape", "10,10,10", "--rank", "3", "--samples", "20", "--runs", "4",
        "--format", "csv",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = String::from_utf8(out.stdout).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next().unwrap(), "seed,method,d,shape,rank,samples,p,workers,rel_error,total_s,stage_json");
    let rows = sketchtucker_bench::experiment::read_csv(text.as_bytes()).unwrap();
    assert_eq!(rows.len(), 4);
    assert!(rows.iter().all(|r| r.rel_error < 1e-10 && r.total_s.is_some()));
}

#[test]
fn single_seed_rerun_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let args = |out: &str| {
        vec![
            "bench".to_string(), "--method".into(), "t-hosvd".into(), "--shape".into(), "8,7,6".into(), "--rank".into(),
            "2".into(), "--omit-timings".into(), "--format".into(), "csv".into(), "--out".into(), out.to_string(),
        ]
    };
    let (a, b) = (dir.path().join("a.csv"), dir.path().join("b.csv"));
    for f in [&a, &b] {
        let out = Command::new(env!("CARGO_BIN_EXE_sketchtucker")).args(args(p(f))).output().unwrap();
        assert!(out.status.success());
    }
    assert_eq!(std::fs::read(a).unwrap(), std::fs::read(b).unwrap());
}

#[test]
fn bench_writes_csv_and_summary_pair() {
    let dir = tempfile::tempdir().unwrap();
    let prefix = dir.path().join("grid");
    let out = run(&[
        "bench", "--method", "sub-r-rtl-ht", "--shape", "6^4", "--rank", "2", "--alpha", "4", "--runs", "3", "--out",
        p(&prefix),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let summary: Value = serde_json::from_str(&std::fs::read_to_string(prefix.with_extension("json")).unwrap()).unwrap();
    assert_eq!(summary["runs"], 3);
    assert!(summary["rel_error"]["median"].as_f64().unwrap() < 1e-8);
    assert!(!summary["sampling_fractions"].as_array().unwrap().is_empty());
    assert!(prefix.with_extension("csv").exists());
}

#[test]
fn fraction_lines() {
    let out = run(&["bench", "--fraction", "8:15:75", "--fraction", "8:16:10000", "--fraction", "8:20:10000"]);
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    for pct in ["(0.00005%)", "(0.004%)", "(0.0008%)"] {
        assert!(text.contains(pct), "{text}");
    }
}

#[test]
fn argument_errors_exit_2_with_reason() {
    for args in [
        vec!["tucker", "--shape", "5,5,5"],
        vec!["tucker", "--method", "sub-r-hosvd", "--shape", "5,5,5", "--rank", "2"],
        vec!["tucker", "--method", "rtl-ht", "--shape", "5,5,5", "--rank", "2"],
        vec!["tucker", "--method", "magic", "--shape", "5,5,5", "--rank", "2"],
        vec!["bench", "--shape", "x"],
        vec!["frobnicate"],
    ] {
        let out = run(&args);
        assert_eq!(out.status.code(), Some(2), "{args:?}");
        let err = error_json(&out);
        assert_eq!(err["error"], "argument", "{args:?}");
        assert!(err["message"].as_str().is_some_and(|m| !m.is_empty()));
    }
}

#[test]
fn io_errors_exit_3() {
    let out = run(&["tucker", "--method", "t-hosvd", "--input", "/nonexistent/x.srtt", "--rank", "2"]);
    assert_eq!(out.status.code(), Some(3));
    assert_eq!(error_json(&out)["error"], "io");

    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.srtt");
    std::fs::write(&bad, b"not a tensor").unwrap();
    let out = run(&["tucker", "--method", "t-hosvd", "--input", p(&bad), "--rank", "2"]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn check_exit_codes() {
    let out = run(&["check", "--presets", "bound-spots,lemma31-full"]);
    assert!(out.status.success());
    let reports: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(reports.as_array().unwrap().len(), 2);

    let out = run(&["check", "--presets", ""]);
    assert!(out.status.success());
    assert_eq!(serde_json::from_slice::<Value>(&out.stdout).unwrap(), serde_json::json!([]));

    let out = run(&["check", "--presets", "lemma31-coherent"]);
    assert_eq!(out.status.code(), Some(5));
    assert_eq!(error_json(&out)["error"], "check-failed");
    let reports: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(reports[0]["pass"], false);
    assert!(reports[0]["note"].as_str().unwrap().contains("M1"));
}

#[test]
fn strict_rank_shortfall_exits_6() {
    let dir = tempfile::tempdir().unwrap();
    let file = dir.path().join("low.srtt");
    assert!(run(&["gen", "--shape", "8,8,8", "--rank", "2", "--out", p(&file)]).status.success());
    let args = ["tucker", "--method", "sub-r-hosvd", "--input", p(&file), "--rank", "4", "--samples", "20"];
    assert!(run(&args).status.success());
    let mut strict = args.to_vec();
    strict.push("--strict");
    let out = run(&strict);
    assert_eq!(out.status.code(), Some(6));
    assert_eq!(error_json(&out)["error"], "numerical-rank");
}

#[test]
fn help_exits_zero() {
    assert!(run(&["--help"]).status.success());
    assert!(run(&["bench", "--help"]).status.success());
}
