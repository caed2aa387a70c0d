mod common;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use clinrag::runner::{load_cases, BatchSummary, FAILED_LABEL};
use clinrag::trace::{TraceEvent, TraceFile};
use clinrag::Error;

use common::fixture_dir;
use common::oracles::confusion_matrix_scores;

fn clinrag(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_clinrag"))
        .args(args)
        .env("CLINRAG_LOG", "off")
        .output()
        .unwrap()
}

/// Replay config in `dir` over the fixture, with `cases` as the case file.
fn write_config(dir: &Path, cases: &Path) -> PathBuf {
    let f = |name: &str| fixture_dir().join(name).display().to_string();
    let text = format!(
        r#"[kg]
concepts = "{}"
triples = "{}"

[corpus]
guidelines = "{}"
cases = "{}"
labels = "{}"

[backend]
mode = "replay"
transcript = "{}"

[output]
dir = "{}"
workers = 3
"#,
        f("concepts.tsv"),
        f("triples.tsv"),
        f("guidelines.jsonl"),
        cases.display(),
        f("labels.tsv"),
        f("transcript.jsonl"),
        dir.join("out").display(),
    );
    let path = dir.join("config.toml");
    fs::write(&path, text).unwrap();
    path
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

#[test]
fn validate_reports_every_bad_field_and_exits_1() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.toml");
    fs::write(
        &path,
        "[kg]\nconcepts = \"c\"\ntriples = \"t\"\n[corpus]\nguidelines = \"g\"\ncases = \"x\"\n[backend]\nmode = \"replay\"\n[params]\ntau_suff = 1.5\n",
    )
    .unwrap();
    let out = clinrag(&["validate", "--config", path.to_str().unwrap()]);
    assert_eq!(code(&out), 1);
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("transcript"), "{err}");
    assert!(err.contains("tau_suff"), "{err}");
}

#[test]
fn validate_prints_effective_config() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), &fixture_dir().join("cases.jsonl"));
    let out = clinrag(&["validate", "--config", config.to_str().unwrap()]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let json: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(json["params"]["k"], 8);
    assert_eq!(json["params"]["t_max"], 3);
}

#[test]
fn batch_writes_summary_whose_metrics_follow_from_its_rows() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), &fixture_dir().join("cases.jsonl"));
    let out = clinrag(&["batch", "--config", config.to_str().unwrap()]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let summary: BatchSummary =
        serde_json::from_str(&fs::read_to_string(dir.path().join("out/summary.json")).unwrap()).unwrap();
    assert_eq!(summary.failed, 0);
    let ids: Vec<&str> = summary.rows.iter().map(|r| r.case_id.as_str()).collect();
    let expected: Vec<String> = (1..=10).map(|i| format!("c{i:02}")).collect();
    assert_eq!(ids, expected);
    let pairs: Vec<(&str, &str)> = summary
        .rows
        .iter()
        .map(|r| (r.ground_truth.as_deref().unwrap(), r.prediction.as_str()))
        .collect();
    let oracle = confusion_matrix_scores(&pairs);
    assert!((summary.metrics.weighted_f1 - oracle.f1).abs() < 1e-9);
    assert!((summary.metrics.weighted_precision - oracle.precision).abs() < 1e-9);
    for row in &summary.rows {
        let trace = TraceFile::read(&dir.path().join("out").join(clinrag::runner::trace_file_name(&row.case_id))).unwrap();
        assert_eq!(trace.trace_digest, row.trace_digest);
        assert_eq!(trace.recomputed_digest(), row.trace_digest);
    }
}

#[test]
fn run_single_case_and_unknown_case() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), &fixture_dir().join("cases.jsonl"));
    let out = clinrag(&["run", "--config", config.to_str().unwrap(), "--case-id", "c06"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let json: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(json["case_id"], "c06");
    assert_eq!(json["report"]["route"], "Deliberation");
    assert!(dir.path().join("out/c06.trace.jsonl").exists());

    let out = clinrag(&["run", "--config", config.to_str().unwrap(), "--case-id", "c99"]);
    assert_eq!(code(&out), 3);
    assert!(String::from_utf8_lossy(&out.stderr).contains("c99"));
}

#[test]
fn failing_case_leaves_partial_trace_and_failed_row() {
    let dir = tempfile::tempdir().unwrap();
    let mut cases = fs::read_to_string(fixture_dir().join("cases.jsonl")).unwrap();
    cases.push_str(
        "{\"case_id\": \"x01\", \"narrative\": \"A narrative the transcript has never seen.\", \"ground_truth\": \"K74.3\"}\n",
    );
    let cases_path = dir.path().join("cases.jsonl");
    fs::write(&cases_path, cases).unwrap();
    let config = write_config(dir.path(), &cases_path);
    let out = clinrag(&["batch", "--config", config.to_str().unwrap()]);
    assert_eq!(code(&out), 2);

    let summary: BatchSummary =
        serde_json::from_str(&fs::read_to_string(dir.path().join("out/summary.json")).unwrap()).unwrap();
    assert_eq!(summary.failed, 1);
    assert_eq!(summary.rows.len(), 11);
    let failed = summary.rows.iter().find(|r| r.case_id == "x01").unwrap();
    assert_eq!(failed.prediction, FAILED_LABEL);
    assert_eq!(failed.correct, Some(false));
    assert!(failed.error.as_deref().unwrap().contains("replay"), "{:?}", failed.error);
    // The other ten still run and count.
    assert_eq!(summary.metrics.cases, 11);
    assert!(summary.rows.iter().filter(|r| r.case_id != "x01").all(|r| r.error.is_none()));

    let trace = TraceFile::read(&dir.path().join("out/x01.trace.jsonl")).unwrap();
    let last = trace.records.last().unwrap();
    assert!(matches!(last.event, TraceEvent::Error { .. }), "{:?}", last.event);
    assert_eq!(trace.recomputed_digest(), failed.trace_digest);
}

#[test]
fn empty_case_file_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("cases.jsonl");
    fs::write(&path, "\n").unwrap();
    assert!(matches!(load_cases(&path), Err(Error::NoCases)));
    let config = write_config(dir.path(), &path);
    assert_eq!(code(&clinrag(&["batch", "--config", config.to_str().unwrap()])), 3);
}
