//! Batch subcommands. Each reads flow-log files and writes JSON to `out`:
//! a single document for `train`, `eval` and `synth`, one line per input
//! flow for `ingest`, `extract` and `rewrite`.

use std::fs;
use std::io::{self, Read, Write};
use std::path::Path;

use leakwatch_core::engine::{load_labeled, Engine, EngineConfig, IngestError, IngestItem, OutcomeRecord};
use leakwatch_core::registry::{compare_with_general, kfold_evaluate, ModelSummary};
use leakwatch_core::rewrite::rewrite as apply_rules;
use leakwatch_core::synth::{generate, CorpusSpec};
use leakwatch_core::{
    parse_flow_record, Extraction, ModelSet, PipelineConfig, PredictionRecord, RewriteRule, Tokenizer,
};
use serde::Serialize;
use serde_json::json;

use crate::CliError;

pub type Result<T> = std::result::Result<T, CliError>;

/// Per-line result of the streaming subcommands, shaped like the ingest API.
#[derive(Debug, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Item<T> {
    Ok(T),
    Error(IngestError),
}

fn line_error(index: usize, e: CliError) -> IngestError {
    let status = if e.kind == "io" { 500 } else { 400 };
    IngestError { index, status, kind: e.kind, message: e.message }
}

/// Reads `path`, or standard input when it is `-`.
pub fn read_input(path: &Path) -> Result<String> {
    if path == Path::new("-") {
        let mut s = String::new();
        io::stdin().read_to_string(&mut s)?;
        return Ok(s);
    }
    fs::read_to_string(path).map_err(|e| CliError::new("io", format!("{}: {e}", path.display())))
}

fn non_blank(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty())
}

fn write_json<T: Serialize>(out: &mut dyn Write, value: &T) -> Result<()> {
    serde_json::to_writer_pretty(&mut *out, value)?;
    writeln!(out)?;
    Ok(())
}

fn write_line<T: Serialize>(out: &mut dyn Write, value: &T) -> Result<()> {
    serde_json::to_writer(&mut *out, value)?;
    writeln!(out)?;
    Ok(())
}

/// The engine configuration at `path`, or the defaults.
pub fn load_config(path: Option<&Path>) -> Result<EngineConfig> {
    match path {
        Some(p) => Ok(EngineConfig::load(p)?),
        None => Ok(EngineConfig::default()),
    }
}

/// Rules from a JSON array or a JSON-lines file; every rule must be valid.
/// Rules without an id get `r<position>`, counting from 1.
pub fn load_rules(path: &Path) -> Result<Vec<RewriteRule>> {
    let text = read_input(path)?;
    let mut rules: Vec<RewriteRule> = if text.trim_start().starts_with('[') {
        serde_json::from_str(&text)?
    } else {
        non_blank(&text).map(|(_, l)| serde_json::from_str(l)).collect::<std::result::Result<_, _>>()?
    };
    for (i, r) in rules.iter_mut().enumerate() {
        if r.rule_id.trim().is_empty() {
            r.rule_id = format!("r{}", i + 1);
        }
        r.validate()?;
    }
    Ok(rules)
}

fn load_models(dir: &Path) -> Result<ModelSet> {
    ModelSet::load(dir)?.ok_or_else(|| CliError::new("config", format!("no model set in {}", dir.display())))
}

#[derive(Debug, Serialize)]
struct TrainSummary {
    generation: u64,
    corpus_size: usize,
    positives: usize,
    models: Vec<ModelSummary>,
}

/// Trains on a labeled flow log and writes the model set to `out_dir`.
/// Models whose training rows did not change keep their version.
pub fn train(flows: &Path, labels: &Path, out_dir: &Path, cfg: &PipelineConfig, out: &mut dyn Write) -> Result<()> {
    let tokenizer = Tokenizer::new(cfg.tokenizer.clone())?;
    let examples = load_labeled(flows, labels, &tokenizer)?;
    let previous = ModelSet::load(out_dir)?;
    let set = ModelSet::train(&examples, cfg, previous.as_ref())?;
    set.save(out_dir)?;
    log::info!("wrote {} models to {}", set.models.len(), out_dir.display());
    write_json(
        out,
        &TrainSummary {
            generation: set.generation,
            corpus_size: examples.len(),
            positives: examples.iter().filter(|e| e.is_positive()).count(),
            models: set.summaries(),
        },
    )
}

/// k-fold evaluation plus the comparison against the general classifier.
pub fn eval(flows: &Path, labels: &Path, k: usize, cfg: &PipelineConfig, out: &mut dyn Write) -> Result<()> {
    if k < 2 {
        return Err(CliError::new("config", "--kfold must be at least 2"));
    }
    let tokenizer = Tokenizer::new(cfg.tokenizer.clone())?;
    let examples = load_labeled(flows, labels, &tokenizer)?;
    let report = kfold_evaluate(&examples, cfg, k)?;
    let comparison = match compare_with_general(&examples, cfg, &report) {
        Ok(c) => Some(c),
        Err(e) => {
            log::warn!("skipping general comparison: {e}");
            None
        }
    };
    write_json(out, &json!({ "evaluation": report, "general_comparison": comparison }))
}

/// Feeds a flow log through an engine opened from `config`, printing one
/// ingest result per line. Malformed lines are reported and skipped.
pub fn ingest(file: &Path, config: EngineConfig, out: &mut dyn Write) -> Result<()> {
    let text = read_input(file)?;
    let engine = Engine::open(config)?;
    let (mut ok, mut failed) = (0, 0);
    for (index, line) in non_blank(&text) {
        let item = match serde_json::from_str::<serde_json::Value>(line) {
            Ok(v) => match engine.ingest_records(vec![v]).pop() {
                Some(IngestItem::Error(mut e)) => {
                    e.index = index;
                    IngestItem::Error(e)
                }
                Some(item) => item,
                None => continue,
            },
            Err(e) => IngestItem::Error(line_error(index, e.into())),
        };
        match item {
            IngestItem::Ok(_) => ok += 1,
            IngestItem::Error(_) => failed += 1,
        }
        write_line(out, &item)?;
    }
    log::info!("ingested {ok} flows, {failed} malformed");
    Ok(())
}

fn classify_lines<T: Serialize>(
    text: &str,
    set: &ModelSet,
    tokenizer: &Tokenizer,
    out: &mut dyn Write,
    mut render: impl FnMut(&leakwatch_core::AnalyzedFlow, PredictionRecord) -> T,
) -> Result<()> {
    for (index, line) in non_blank(text) {
        let item = match parse_flow_record(line) {
            Ok(flow) => {
                let af = tokenizer.analyze(flow);
                let prediction = set.classify(&af);
                Item::Ok(render(&af, prediction))
            }
            Err(e) => Item::Error(line_error(index, e.into())),
        };
        write_line(out, &item)?;
    }
    Ok(())
}

#[derive(Debug, Serialize)]
struct ExtractLine {
    flow_id: String,
    positive: bool,
    score: f64,
    classifier: String,
    extracted: Vec<Extraction>,
}

/// Classifies each flow with the model set in `models` and prints the
/// leaking key/value pairs of the positives.
pub fn extract(file: &Path, models: &Path, cfg: &PipelineConfig, out: &mut dyn Write) -> Result<()> {
    let text = read_input(file)?;
    let set = load_models(models)?;
    let tokenizer = Tokenizer::new(cfg.tokenizer.clone())?;
    classify_lines(&text, &set, &tokenizer, out, |_, p| ExtractLine {
        flow_id: p.flow_id,
        positive: p.positive,
        score: p.score,
        classifier: p.classifier_key.to_string(),
        extracted: p.extracted,
    })
}

#[derive(Debug, Serialize)]
struct RewriteLine {
    flow_id: String,
    positive: bool,
    extracted: Vec<Extraction>,
    #[serde(flatten)]
    outcome: OutcomeRecord,
}

/// Classifies each flow and applies `rules`, printing the decision and the
/// rewritten flow record.
pub fn rewrite(file: &Path, rules: &Path, models: &Path, cfg: &PipelineConfig, out: &mut dyn Write) -> Result<()> {
    let text = read_input(file)?;
    let rules = load_rules(rules)?;
    let set = load_models(models)?;
    let tokenizer = Tokenizer::new(cfg.tokenizer.clone())?;
    classify_lines(&text, &set, &tokenizer, out, |af, p| {
        let outcome = apply_rules(&af.flow, &p, &rules);
        RewriteLine {
            flow_id: p.flow_id,
            positive: p.positive,
            extracted: p.extracted,
            outcome: OutcomeRecord {
                decision: outcome.decision,
                applied_rules: outcome.applied_rules,
                modified_flow: outcome.modified_flow.map(|f| f.to_record()),
            },
        }
    })
}

/// Generates a corpus from the corpus-spec file at `spec` (or the default corpus) and
/// writes `flows.jsonl` and `labels.jsonl` under `out_dir`.
pub fn synth(spec: Option<&Path>, out_dir: &Path, out: &mut dyn Write) -> Result<()> {
    let spec: CorpusSpec = match spec {
        Some(p) => serde_json::from_str(&read_input(p)?)?,
        None => CorpusSpec::default(),
    };
    let corpus = generate(&spec)?;
    corpus.write(out_dir)?;
    let positives = corpus.labels.iter().filter(|l| !l.leaks.is_empty()).count();
    write_json(
        out,
        &json!({
            "flows": corpus.flows.len(),
            "positives": positives,
            "flow_log": out_dir.join("flows.jsonl"),
            "label_log": out_dir.join("labels.jsonl"),
        }),
    )
}
