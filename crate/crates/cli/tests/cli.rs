use std::collections::BTreeSet;
use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use conjunct_core::lexicon::Lexicon;
use conjunct_core::metrics::{compliance, ComplianceReport};
use serde_json::Value;

fn conjunct(args: &[&str], config: Option<&Path>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_conjunct"));
    if let Some(c) = config {
        cmd.arg("--config").arg(c);
    }
    cmd.args(args).output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn stdout_json(o: &Output) -> Value {
    serde_json::from_slice(&o.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    let out = dir.path().join("never");
    fs::write(&bad, r#"{"methods": ["prompt_only", "beam_magic"], "output_dir": "x"}"#).unwrap();
    let o = conjunct(&["run", "--out", p(&out)], Some(&bad));
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("beam_magic"));
    assert!(!out.exists(), "config errors must not create output");

    fs::write(&bad, r#"{"seeds": []}"#).unwrap();
    assert_eq!(code(&conjunct(&["automaton-dot", "--mode", "and"], Some(&bad))), 1);
    assert_eq!(code(&conjunct(&["decode"], None)), 1);
    assert_eq!(code(&conjunct(&["--help"], None)), 0);

    let missing = dir.path().join("missing.jsonl");
    assert_eq!(code(&conjunct(&["eval", "--input", p(&missing)], None)), 2);

    let dot = conjunct(&["automaton-dot", "--mode", "or"], None);
    assert_eq!(code(&dot), 0);
    assert!(String::from_utf8_lossy(&dot.stdout).starts_with("digraph"));
}

#[test]
fn decode_then_eval_agrees_with_library() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("and.jsonl");
    let o = conjunct(
        &["decode", "--mode", "and", "--samples", "4", "--occupation", "nurse", "--occupation", "pilot", "--out", p(&out)],
        None,
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let lines: Vec<Value> = fs::read_to_string(&out)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(lines.len(), 8);
    assert!(lines.iter().all(|l| l["method"] == "ctrlg" && l["variant"] == "and"));

    let eval = conjunct(&["eval", "--input", p(&out)], None);
    assert_eq!(code(&eval), 0);
    let texts: Vec<&str> = lines.iter().map(|l| l["text"].as_str().unwrap()).collect();
    let direct = compliance(&texts, &Lexicon::default()).unwrap();
    let reported: ComplianceReport = serde_json::from_value(stdout_json(&eval)["compliance"].clone()).unwrap();
    assert_eq!(reported, direct);
    assert_eq!(reported.and_pct, 100.0);

    // Without --out the records go to stdout.
    let o = conjunct(&["decode", "--mode", "or", "--samples", "2", "--occupation", "nurse"], None);
    assert_eq!(String::from_utf8_lossy(&o.stdout).lines().count(), 2);
}

#[test]
fn ingest_and_report_external_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("external.jsonl");
    let rows = [
        r#"{"method": "prompt_only", "variant": "some-model", "occupation": "nurse", "seed": 1, "text": "The nurse was caring and confident."}"#,
        r#"{"method": "prompt_only", "variant": "some-model", "occupation": "nurse", "seed": 1, "text": "   "}"#,
        "",
        r#"{"method": "prompt_only", "variant": "some-model", "occupation": "pilot", "seed": 1, "text": "The pilot was kind."}"#,
        r#"{"method": "prompt_only", "variant": "some-model", "occupation": "pilot", "seed": 2, "text": "The pilot was friendly and assertive."}"#,
    ];
    fs::write(&input, rows.join("\n")).unwrap();
    let norm = dir.path().join("norm");
    let o = conjunct(&["ingest", "--input", p(&input), "--out", p(&norm)], None);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(stdout_json(&o), serde_json::json!({"records": 3, "skipped": 1}));
    let skipped: Value = serde_json::from_str(&fs::read_to_string(norm.join("skipped.json")).unwrap()).unwrap();
    assert_eq!(skipped[0]["line"], 2);

    let report = dir.path().join("report");
    let o = conjunct(&["report", "--input", p(&norm.join("completions.jsonl")), "--out", p(&report)], None);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(stdout_json(&o), serde_json::json!({"rows": 2, "groups": 1}));
    let csv = fs::read_to_string(report.join("report.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);
    assert!(csv.lines().next().unwrap().starts_with("method,variant,seed,n,and_pct"));

    fs::write(&input, format!("{}\n{{\"method\": \"oracle\"}}\n", rows[0])).unwrap();
    let o = conjunct(&["ingest", "--input", p(&input), "--out", p(&norm)], None);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains(":2"));
}

#[test]
fn small_run_covers_every_method() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("config.json");
    let out = dir.path().join("results");
    let config = serde_json::json!({
        "seeds": [7, 8],
        "samples": {"per_occupation": 3, "filter_raw_per_occupation": 15},
        "preference": {"base_epochs": 10, "sft": {"epochs": 10}, "dpo": {"epochs": 10}},
        "bootstrap_resamples": 50,
        "output_dir": p(&out),
    });
    fs::write(&cfg, config.to_string()).unwrap();
    let o = conjunct(&["run"], Some(&cfg));
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));

    let summary: Value = serde_json::from_str(&fs::read_to_string(out.join("summary.json")).unwrap()).unwrap();
    let rows = summary["rows"].as_array().unwrap();
    assert_eq!(rows.len(), 7 * 2);
    let strategies: BTreeSet<&str> = rows.iter().map(|r| r["method"].as_str().unwrap()).collect();
    assert_eq!(strategies.len(), 6);
    assert_eq!(summary["groups"].as_array().unwrap().len(), 7);
    // Default evaluation set is the five held-out occupations.
    let completions = fs::read_to_string(out.join("completions.jsonl")).unwrap();
    let occupations: BTreeSet<String> = completions
        .lines()
        .map(|l| serde_json::from_str::<Value>(l).unwrap()["occupation"].as_str().unwrap().to_owned())
        .collect();
    assert_eq!(occupations.len(), 5);
    for r in rows.iter().filter(|r| r["method"] != "filter") {
        assert_eq!(r["n"], 15, "{r}");
    }
}
