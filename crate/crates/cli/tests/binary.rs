use std::path::Path;
use std::process::{Command, Output};

use leakwatch_core::synth::CorpusSpec;
use serde_json::{json, Value};

fn leakwatch(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_leakwatch")).args(args).output().unwrap()
}

fn stdout_json(o: &Output) -> Value {
    assert!(o.status.success(), "stderr: {}", String::from_utf8_lossy(&o.stderr));
    serde_json::from_slice(&o.stdout).unwrap()
}

fn stdout_lines(o: &Output) -> Vec<Value> {
    assert!(o.status.success(), "stderr: {}", String::from_utf8_lossy(&o.stderr));
    String::from_utf8_lossy(&o.stdout).lines().map(|l| serde_json::from_str(l).unwrap()).collect()
}

fn stderr_error(o: &Output) -> Value {
    let v: Value = serde_json::from_slice(&o.stderr).unwrap();
    v["error"].clone()
}

fn write_spec(dir: &Path, seed: u64, prefix: &str) -> String {
    let mut spec = CorpusSpec { flows_per_domain: 200, rng_seed: seed, id_prefix: prefix.into(), ..CorpusSpec::default() };
    let d = spec.domains.clone();
    spec.domains = [&d[0..4], &d[4..5], &d[28..29], &d[36..37]].concat();
    let path = dir.join(format!("spec-{seed}.json"));
    std::fs::write(&path, serde_json::to_string(&spec).unwrap()).unwrap();
    path.to_str().unwrap().to_string()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn synth_train_eval_extract_rewrite_ingest() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let train_dir = root.join("train");
    let test_dir = root.join("test");
    let models = root.join("models");

    let summary = stdout_json(&leakwatch(&["synth", "--spec", &write_spec(root, 5, ""), "--out", s(&train_dir)]));
    let n = summary["flows"].as_u64().unwrap() as usize;
    assert!(n >= 800);
    assert!(summary["positives"].as_u64().unwrap() > 100);
    let n_test = stdout_json(&leakwatch(&["synth", "--spec", &write_spec(root, 6, "t-"), "--out", s(&test_dir)]))["flows"]
        .as_u64()
        .unwrap() as usize;
    let flows = train_dir.join("flows.jsonl");
    let labels = train_dir.join("labels.jsonl");

    let trained = stdout_json(&leakwatch(&["train", "--flows", s(&flows), "--labels", s(&labels), "--out", s(&models)]));
    assert_eq!(trained["generation"], 1);
    assert_eq!(trained["corpus_size"], n);
    assert!(trained["models"].as_array().unwrap().len() >= 4);
    let again = stdout_json(&leakwatch(&["train", "--flows", s(&flows), "--labels", s(&labels), "--out", s(&models)]));
    assert_eq!(again["generation"], 2);
    let versions = |v: &Value| v["models"].as_array().unwrap().iter().map(|m| m["version"].clone()).collect::<Vec<_>>();
    assert_eq!(versions(&trained), versions(&again));

    let eval =
        stdout_json(&leakwatch(&["eval", "--flows", s(&flows), "--labels", s(&labels), "--kfold", "5"]));
    let per_classifier = eval["evaluation"]["per_classifier"].as_array().unwrap();
    assert!(!per_classifier.is_empty());
    assert_eq!(eval["evaluation"]["k"], 5);
    assert!(eval.get("general_comparison").is_some());

    let test_flows = test_dir.join("flows.jsonl");
    let extracted = stdout_lines(&leakwatch(&["extract", s(&test_flows), "--models", s(&models)]));
    assert_eq!(extracted.len(), n_test);
    let hits: Vec<&Value> = extracted.iter().filter(|l| l["ok"]["positive"] == true).collect();
    assert!(hits.len() > 100);
    // per-domain classifiers name the leaking pair; general hits on unseen domains may not
    let per_domain = hits.iter().filter(|h| h["ok"]["classifier"] != "general");
    assert!(per_domain.clone().count() > 100);
    assert!(per_domain.into_iter().all(|h| !h["ok"]["extracted"].as_array().unwrap().is_empty()));

    let rules = root.join("rules.jsonl");
    std::fs::write(&rules, json!({"scope": {"ByCategory": "DeviceIdentifier"}, "action": "Remove"}).to_string()).unwrap();
    let rewritten = stdout_lines(&leakwatch(&["rewrite", s(&test_flows), "--rules", s(&rules), "--models", s(&models)]));
    assert_eq!(rewritten.len(), n_test);
    let modified: Vec<&Value> = rewritten.iter().filter(|l| l["ok"]["decision"] == "Modified").collect();
    assert!(!modified.is_empty());
    assert!(modified.iter().all(|l| l["ok"]["modified_flow"].is_object()));
    assert!(modified.iter().all(|l| l["ok"]["applied_rules"] == json!(["r1"])));
    assert!(rewritten.iter().filter(|l| l["ok"]["positive"] == false).all(|l| l["ok"]["decision"] == "Pass"));

    let store = root.join("store");
    let config = root.join("engine.json");
    let cfg = json!({
        "training": {"flows": flows, "labels": labels},
        "evaluate_after_training": false,
        "storage": {"dir": store},
    });
    std::fs::write(&config, cfg.to_string()).unwrap();
    let mut log = std::fs::read_to_string(&test_flows).unwrap().lines().take(20).collect::<Vec<_>>().join("\n");
    log.push_str("\n{not json\n");
    let log_path = root.join("mixed.jsonl");
    std::fs::write(&log_path, log).unwrap();
    let ingested = stdout_lines(&leakwatch(&["ingest", s(&log_path), "--config", s(&config)]));
    assert_eq!(ingested.len(), 21);
    assert!(ingested[..20].iter().all(|l| l["ok"]["prediction_id"].is_string()));
    assert_eq!(ingested[20]["error"]["index"], 20);
    assert_eq!(ingested[20]["error"]["kind"], "json");
}

#[test]
fn failures_print_json_errors_and_exit_nonzero() {
    let tmp = tempfile::tempdir().unwrap();
    let missing = tmp.path().join("absent.jsonl");

    let o = leakwatch(&["extract", s(&missing), "--models", s(tmp.path())]);
    assert_eq!(o.status.code(), Some(1));
    assert_eq!(stderr_error(&o)["kind"], "io");

    let flows = tmp.path().join("f.jsonl");
    std::fs::write(&flows, "").unwrap();
    let o = leakwatch(&["extract", s(&flows), "--models", s(tmp.path())]);
    assert_eq!(o.status.code(), Some(1));
    assert_eq!(stderr_error(&o)["kind"], "config");

    let o = leakwatch(&["eval", "--flows", s(&flows), "--labels", s(&flows), "--kfold", "1"]);
    assert_eq!(o.status.code(), Some(1));

    let bad_rules = tmp.path().join("rules.json");
    std::fs::write(&bad_rules, r#"[{"scope": {"ByDomain": ""}, "action": "Block"}]"#).unwrap();
    let o = leakwatch(&["rewrite", s(&flows), "--rules", s(&bad_rules), "--models", s(tmp.path())]);
    assert_eq!(o.status.code(), Some(1));
    assert_eq!(stderr_error(&o)["kind"], "invalid_rule");

    let o = leakwatch(&["frobnicate"]);
    assert_eq!(o.status.code(), Some(2));
    assert_eq!(stderr_error(&o)["kind"], "usage");
}
