mod common;

use common::*;
use serde_json::Value;
use std::path::Path;
use std::process::Command;

fn run(args: &[&str]) -> (i32, String) {
    let out = Command::new(env!("CARGO_BIN_EXE_stackcheck")).args(args).output().unwrap();
    (out.status.code().unwrap(), String::from_utf8(out.stdout).unwrap())
}

fn case(name: &str) -> String {
    corpus_dir().join(name).display().to_string()
}

fn schema_check(report: &Value) {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../docs/report.schema.json");
    let schema: Value = serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap();
    let v = jsonschema::validator_for(&schema).unwrap();
    let errors: Vec<String> = v.iter_errors(report).map(|e| format!("{} at {}", e, e.instance_path)).collect();
    assert!(errors.is_empty(), "{errors:#?}");
}

#[test]
fn exit_codes() {
    assert_eq!(run(&["analyze", &case("strcpy_argv_vuln.s")]).0, 1);
    assert_eq!(run(&["analyze", &case("strcpy_argv_clean.s")]).0, 0);
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.s");
    std::fs::write(&bad, "this is not a listing\n").unwrap();
    assert_eq!(run(&["analyze", &case("strcpy_argv_vuln.s"), bad.to_str().unwrap()]).0, 2);
    assert_eq!(run(&["analyze", "/nonexistent/x.s"]).0, 2);
}

#[test]
fn text_report_names_properties() {
    let (_, out) = run(&["analyze", &case("gets_vuln.s")]);
    assert!(out.contains("VULNERABLE"), "{out}");
    assert!(out.contains("[violated] No gets() Usage"), "{out}");
    assert!(out.contains("1 binaries: 1 vulnerable"), "{out}");
}

#[test]
fn corpus_reports_match_schema() {
    let dir = corpus_dir().display().to_string();
    let gt = corpus_dir().join("manifest.toml").display().to_string();
    let (code, out) = run(&["analyze", &dir, "--validate", "--report", "json", "--ground-truth", &gt]);
    assert_eq!(code, 1);
    let report: Value = serde_json::from_str(&out).unwrap();
    schema_check(&report);
    assert_eq!(report["schema_version"], "1.0");
    assert_eq!(report["summary"]["binaries"], 24);
    assert_eq!(report["metrics"]["confusion"]["fp"], 0);
}

#[test]
fn errors_are_isolated_and_match_schema() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("a_bad.s"), "this is not a listing\n").unwrap();
    std::fs::copy(corpus_dir().join("gets_vuln.s"), dir.path().join("b_gets.s")).unwrap();
    let (code, out) = run(&["analyze", dir.path().to_str().unwrap(), "--report", "json"]);
    assert_eq!(code, 2);
    let report: Value = serde_json::from_str(&out).unwrap();
    schema_check(&report);
    let bins = report["binaries"].as_array().unwrap();
    assert_eq!(bins.len(), 2);
    assert_eq!(bins[0]["status"], "error");
    assert!(bins[0]["error"].as_str().is_some_and(|e| !e.is_empty()));
    assert_eq!(bins[1]["status"], "vulnerable");
}

#[test]
fn timeout_is_inconclusive() {
    let (code, out) = run(&["analyze", &case("strcpy_argv_vuln.s"), "--timeout", "1e-9", "--report", "json"]);
    let report: Value = serde_json::from_str(&out).unwrap();
    schema_check(&report);
    let b = &report["binaries"][0];
    assert_eq!(b["status"], "inconclusive");
    assert_eq!(code, 0);
    for p in b["properties"].as_array().unwrap() {
        assert_eq!(p["status"], "inconclusive");
        assert_eq!(p["reason"], "timeout");
    }
}

#[test]
fn invalid_limits_are_rejected() {
    assert_eq!(run(&["analyze", &case("gets_vuln.s"), "--max-states", "0"]).0, 2);
    assert_eq!(run(&["analyze", &case("gets_vuln.s"), "--timeout", "-1"]).0, 2);
}

#[test]
fn patch_and_export_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let ms = dir.path().join("ms");
    let (code, text) = run(&[
        "analyze",
        &case("strcpy_argv_vuln.s"),
        "--patch",
        "--out",
        out.to_str().unwrap(),
        "--export-memstace",
        ms.to_str().unwrap(),
        "--report",
        "json",
    ]);
    assert_eq!(code, 1);
    let report: Value = serde_json::from_str(&text).unwrap();
    schema_check(&report);
    let patched = out.join("strcpy_argv_vuln.patched.s");
    assert_eq!(report["binaries"][0]["patched_listing"], patched.display().to_string());

    // The patched listing is itself a listing, and it is clean.
    let (code, text) = run(&["analyze", patched.to_str().unwrap(), "--report", "json"]);
    let again: Value = serde_json::from_str(&text).unwrap();
    assert_eq!(again["binaries"][0]["status"], "clean", "{text}");
    assert_eq!(code, 0);

    let graph: Value = serde_json::from_str(&std::fs::read_to_string(ms.join("strcpy_argv_vuln.memstace.json")).unwrap()).unwrap();
    let states = report["binaries"][0]["memstace"]["states"].as_u64().unwrap() as usize;
    assert_eq!(graph["states"].as_array().unwrap().len(), states);
    let dot = std::fs::read_to_string(ms.join("strcpy_argv_vuln.memstace.dot")).unwrap();
    assert!(dot.starts_with("digraph"));
}

#[test]
fn patch_requires_out() {
    let out = Command::new(env!("CARGO_BIN_EXE_stackcheck"))
        .args(["analyze", &case("gets_vuln.s"), "--patch"])
        .output()
        .unwrap();
    assert!(!out.status.success());
}

#[test]
fn extra_properties_replace_bundled() {
    let dir = tempfile::tempdir().unwrap();
    let props = dir.path().join("p.ltl");
    std::fs::write(&props, "property \"No gets() Usage\" { ltl: G true }\n").unwrap();
    let (code, text) = run(&["analyze", &case("gets_clean.s"), "--props", props.to_str().unwrap(), "--report", "json"]);
    assert_eq!(code, 0, "{text}");
    let report: Value = serde_json::from_str(&text).unwrap();
    let names: Vec<&str> = report["binaries"][0]["properties"].as_array().unwrap().iter().map(|p| p["name"].as_str().unwrap()).collect();
    assert_eq!(names.len(), 7);
    assert_eq!(names.iter().filter(|n| **n == "No gets() Usage").count(), 1);
}
