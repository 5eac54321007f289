//! The long-running engine behind the service: ingest, review, labels,
//! rules, retraining and metrics, with JSON-lines persistence.
//!
//! Ingest runs concurrently against the published model set and a snapshot
//! of the rules. Label, rule and retrain mutations go through one writer
//! lock; retraining publishes the new model set atomically.

mod config;
mod store;

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex, MutexGuard, RwLock};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Deserializer, Serialize};

use crate::error::{Error, Result};
use crate::flow::{label_examples, parse_flow_record, Example, Flow, FlowRecord, GroundTruthLabel, Leak, Os, PiiCategory, PiiType};
use crate::registry::{
    apply_feedback, backfill_count, kfold_evaluate, ClassifierKey, EvaluationReport, FeedbackLabel, FeedbackReport,
    ModelSet, ModelSummary, PredictionRecord, Registry, Verdict,
};
use crate::rewrite::{rewrite, Decision, RewriteRule, RuleAction, RuleScope};
use crate::tokenize::AnalyzedFlow;

pub use config::{EngineConfig, RetrainSchedule, StorageConfig, TrainingSource};
pub use store::{append_jsonl, read_jsonl, read_lines, write_lines};

const PREDICTIONS: &str = "predictions.jsonl";
const HISTORY: &str = "flows.jsonl";
const LABELS: &str = "labels.jsonl";
const RULES: &str = "rules.jsonl";
const CORPUS_FLOWS: &str = "corpus_flows.jsonl";
const CORPUS_LABELS: &str = "corpus_labels.jsonl";
const MODELS: &str = "models";
const EVALUATION: &str = "evaluation.json";

fn now_ms() -> i64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_millis() as i64).unwrap_or(0)
}

/// Rewrite result as stored and served; the modified flow is a flow-log record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutcomeRecord {
    pub decision: Decision,
    pub applied_rules: Vec<String>,
    pub modified_flow: Option<FlowRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoredPrediction {
    #[serde(flatten)]
    pub prediction: PredictionRecord,
    pub outcome: OutcomeRecord,
    /// Latest verdict any user gave; filled on read, never persisted.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<Verdict>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IngestError {
    pub index: usize,
    pub status: u16,
    pub kind: String,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IngestItem {
    Ok(Box<StoredPrediction>),
    Error(IngestError),
}

/// A user's verdict on one prediction. `leaks` lets the user name values
/// the prediction missed; for `Correct` without it, the extracted values
/// are taken as confirmed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelSubmission {
    pub prediction_id: String,
    pub verdict: Verdict,
    #[serde(default)]
    pub user: String,
    #[serde(default)]
    pub timestamp: Option<i64>,
    #[serde(default)]
    pub leaks: Vec<Leak>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelReceipt {
    pub prediction_id: String,
    pub flow_id: String,
    pub verdict: Verdict,
    /// Stored flows the label will add to the training corpus at the next retrain.
    pub backfill: usize,
    pub pending_labels: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LeakQuery {
    pub since: Option<i64>,
    pub domain: Option<String>,
    /// A PII kind (`IMEI`) or category (`Credential`).
    pub pii: Option<String>,
    pub offset: usize,
    pub limit: Option<usize>,
    /// Include negative predictions too.
    pub all: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Page<T> {
    pub items: Vec<T>,
    pub total: usize,
    pub offset: usize,
    pub next_offset: Option<usize>,
}

fn present<'de, D: Deserializer<'de>, T: Deserialize<'de>>(d: D) -> std::result::Result<Option<T>, D::Error> {
    T::deserialize(d).map(Some)
}

/// Partial rule update; absent fields are left alone, `"pii_filter": null` clears the filter.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RulePatch {
    #[serde(default)]
    pub enabled: Option<bool>,
    #[serde(default)]
    pub scope: Option<RuleScope>,
    #[serde(default, deserialize_with = "present")]
    pub pii_filter: Option<Option<PiiType>>,
    #[serde(default)]
    pub action: Option<RuleAction>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierDelta {
    pub key: ClassifierKey,
    pub n: usize,
    pub fp_before: usize,
    pub fp_after: usize,
    pub fn_before: usize,
    pub fn_after: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelChange {
    pub key: ClassifierKey,
    pub old_version: Option<u64>,
    pub new_version: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrainReport {
    pub retrained: bool,
    pub labels_applied: usize,
    pub feedback: FeedbackReport,
    pub generation: u64,
    pub changed: Vec<ModelChange>,
    /// Errors on the corpus rows of each affected (domain, OS), old model vs new.
    pub deltas: Vec<ClassifierDelta>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LatencyStats {
    pub count: u64,
    pub mean_micros: f64,
    pub max_micros: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub generation: u64,
    pub corpus_size: usize,
    pub predictions: usize,
    pub positive: usize,
    pub blocked: usize,
    pub modified: usize,
    pub pending_labels: usize,
    /// Classify + extract time per ingested flow.
    pub latency: LatencyStats,
    pub evaluation: Option<EvaluationReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelsReport {
    pub generation: u64,
    pub models: Vec<ModelSummary>,
}

#[derive(Default)]
struct State {
    corpus: Vec<Example>,
    corpus_ids: BTreeSet<String>,
    history: Vec<AnalyzedFlow>,
    history_index: HashMap<String, usize>,
    predictions: Vec<StoredPrediction>,
    prediction_index: HashMap<String, usize>,
    labels: BTreeMap<(String, String), LabelSubmission>,
    pending: BTreeSet<(String, String)>,
    evaluation: Option<EvaluationReport>,
    latency_sum: f64,
    latency_max: f64,
}

impl State {
    fn set_corpus(&mut self, corpus: Vec<Example>) {
        self.corpus_ids = corpus.iter().map(|e| e.id().to_string()).collect();
        self.corpus = corpus;
    }

    fn remember_flow(&mut self, af: AnalyzedFlow) {
        match self.history_index.get(&af.flow.id) {
            Some(&i) => self.history[i] = af,
            None => {
                self.history_index.insert(af.flow.id.clone(), self.history.len());
                self.history.push(af);
            }
        }
    }

    fn labeled(&self, sp: &StoredPrediction) -> StoredPrediction {
        let label = self
            .labels
            .values()
            .filter(|l| l.prediction_id == sp.prediction.prediction_id)
            .max_by_key(|l| l.timestamp.unwrap_or(0))
            .map(|l| l.verdict);
        StoredPrediction { label, ..sp.clone() }
    }

    fn record(&mut self, p: StoredPrediction) {
        self.latency_sum += p.prediction.micros;
        self.latency_max = self.latency_max.max(p.prediction.micros);
        self.prediction_index.insert(p.prediction.prediction_id.clone(), self.predictions.len());
        self.predictions.push(p);
    }
}

pub struct Engine {
    config: EngineConfig,
    registry: Registry,
    rules: RwLock<Arc<Vec<RewriteRule>>>,
    state: Mutex<State>,
    writer: Mutex<()>,
    next_id: AtomicU64,
}

fn feedback_label(sub: &LabelSubmission, p: &PredictionRecord) -> FeedbackLabel {
    let extracted: Vec<Leak> = p.extracted.iter().map(|e| Leak { pii: e.pii, value: e.value.clone() }).collect();
    FeedbackLabel {
        flow_id: p.flow_id.clone(),
        verdict: sub.verdict,
        leaks: if sub.leaks.is_empty() { extracted } else { sub.leaks.clone() },
        flagged_values: p.extracted.iter().map(|e| e.value.clone()).collect(),
    }
}

fn pii_matches(filter: &str, p: &PredictionRecord) -> Result<bool> {
    if let Ok(kind) = filter.parse::<PiiType>() {
        return Ok(p.extracted.iter().any(|e| e.pii == kind));
    }
    if let Ok(cat) = filter.parse::<PiiCategory>() {
        return Ok(p.extracted.iter().any(|e| e.pii.category() == cat));
    }
    Err(Error::InvalidQuery(format!("unknown PII kind or category `{filter}`")))
}

impl Engine {
    /// Opens the engine from persisted state. Without stored models it trains
    /// on the configured training source.
    pub fn open(config: EngineConfig) -> Result<Engine> {
        config.validate()?;
        let registry = Registry::new(config.pipeline.clone())?;
        let engine = Engine {
            registry,
            rules: RwLock::new(Arc::new(Vec::new())),
            state: Mutex::new(State::default()),
            writer: Mutex::new(()),
            next_id: AtomicU64::new(0),
            config,
        };
        engine.load()?;
        Ok(engine)
    }

    fn path(&self, name: &str) -> Option<std::path::PathBuf> {
        self.config.storage.path(name)
    }

    fn state(&self) -> MutexGuard<'_, State> {
        self.state.lock().expect("engine state lock poisoned")
    }

    fn load(&self) -> Result<()> {
        let tok = self.registry.tokenizer();
        let mut corpus = Vec::new();
        if let (Some(f), Some(l)) = (self.path(CORPUS_FLOWS), self.path(CORPUS_LABELS)) {
            if f.exists() {
                corpus = load_labeled(&f, &l, tok)?;
            }
        }
        if corpus.is_empty() {
            if let Some(src) = &self.config.training {
                corpus = load_labeled(&src.flows, &src.labels, tok)?;
                log::info!("loaded {} training flows from {}", corpus.len(), src.flows.display());
            }
        }
        let rules: Vec<RewriteRule> = match self.path(RULES) {
            Some(p) => read_jsonl(&p)?,
            None => Vec::new(),
        };
        *self.rules.write().expect("rules lock poisoned") = Arc::new(rules);
        {
            let mut st = self.state();
            if let Some(p) = self.path(HISTORY) {
                for line in read_lines(&p)? {
                    st.remember_flow(tok.analyze(parse_flow_record(&line)?));
                }
            }
            if let Some(p) = self.path(PREDICTIONS) {
                for sp in read_jsonl::<StoredPrediction>(&p)? {
                    st.record(sp);
                }
            }
            if let Some(p) = self.path(LABELS) {
                for sub in read_jsonl::<LabelSubmission>(&p)? {
                    let key = (sub.user.clone(), sub.prediction_id.clone());
                    st.pending.insert(key.clone());
                    st.labels.insert(key, sub);
                }
            }
            if let Some(p) = self.path(EVALUATION).filter(|p| p.exists()) {
                st.evaluation = Some(serde_json::from_slice(&std::fs::read(p)?)?);
            }
            self.next_id.store(st.predictions.len() as u64, Ordering::SeqCst);
            st.set_corpus(corpus);
        }
        let stored = match self.path(MODELS) {
            Some(dir) => ModelSet::load(&dir)?,
            None => None,
        };
        match stored {
            Some(set) => {
                self.registry.publish(set);
            }
            None => {
                let corpus = std::mem::take(&mut self.state().corpus);
                let result = if corpus.is_empty() { Ok(()) } else { self.train_and_store(&corpus).map(|_| ()) };
                self.state().corpus = corpus;
                result?;
            }
        }
        // pending labels already consumed by a stored model set are not replayed
        if let Some(p) = self.path("applied_labels.jsonl") {
            let applied: Vec<(String, String)> = read_jsonl(&p)?;
            let mut st = self.state();
            for k in applied {
                st.pending.remove(&k);
            }
        }
        Ok(())
    }

    pub fn config(&self) -> &EngineConfig {
        &self.config
    }

    pub fn registry(&self) -> &Registry {
        &self.registry
    }

    fn train_and_store(&self, corpus: &[Example]) -> Result<Arc<ModelSet>> {
        let set = self.registry.train_all(corpus)?;
        if let Some(dir) = self.path(MODELS) {
            set.save(&dir)?;
        }
        if let (Some(f), Some(l)) = (self.path(CORPUS_FLOWS), self.path(CORPUS_LABELS)) {
            write_lines(&f, corpus.iter().map(|e| e.flow.flow.to_json_line()))?;
            write_lines(
                &l,
                corpus.iter().map(|e| GroundTruthLabel { flow_id: e.id().to_string(), leaks: e.leaks.clone() }.to_json_line()),
            )?;
        }
        if self.config.evaluate_after_training && !corpus.is_empty() {
            let report = kfold_evaluate(corpus, &self.config.pipeline, self.config.pipeline.registry.kfold_k)?;
            if let Some(p) = self.path(EVALUATION) {
                std::fs::write(p, serde_json::to_vec_pretty(&report)?)?;
            }
            self.state().evaluation = Some(report);
        }
        Ok(set)
    }

    /// Replaces the training corpus and retrains every classifier.
    pub fn train_from(&self, corpus: Vec<Example>) -> Result<ModelsReport> {
        let _w = self.writer.lock().expect("writer lock poisoned");
        let set = self.train_and_store(&corpus)?;
        self.state().set_corpus(corpus);
        Ok(ModelsReport { generation: set.generation, models: set.summaries() })
    }

    /// Classifies one flow, applies the rules, and records the result.
    pub fn ingest_flow(&self, flow: Flow) -> Result<StoredPrediction> {
        let af = self.registry.analyze(flow);
        let mut prediction = self.registry.classify(&af);
        prediction.prediction_id = format!("p{:09}", self.next_id.fetch_add(1, Ordering::SeqCst));
        let rules = self.rules.read().expect("rules lock poisoned").clone();
        let outcome = rewrite(&af.flow, &prediction, &rules);
        let stored = StoredPrediction {
            label: None,
            prediction,
            outcome: OutcomeRecord {
                decision: outcome.decision,
                applied_rules: outcome.applied_rules,
                modified_flow: outcome.modified_flow.map(|f| f.to_record()),
            },
        };
        let mut st = self.state();
        if let Some(p) = self.path(HISTORY) {
            append_jsonl(&p, &[af.flow.to_record()])?;
        }
        if let Some(p) = self.path(PREDICTIONS) {
            append_jsonl(&p, std::slice::from_ref(&stored))?;
        }
        st.remember_flow(af);
        st.record(stored.clone());
        Ok(stored)
    }

    /// Ingests flow-log records; a malformed record yields an error item and
    /// the batch continues.
    pub fn ingest_records(&self, records: Vec<serde_json::Value>) -> Vec<IngestItem> {
        records
            .into_iter()
            .enumerate()
            .map(|(index, v)| {
                let flow = serde_json::from_value::<FlowRecord>(v)
                    .map_err(|e| Error::FlowField { field: "record", reason: e.to_string() })
                    .and_then(Flow::from_record);
                match flow.and_then(|f| self.ingest_flow(f)) {
                    Ok(p) => IngestItem::Ok(Box::new(p)),
                    Err(e) => IngestItem::Error(IngestError {
                        index,
                        status: if matches!(e, Error::Io(_)) { 500 } else { 400 },
                        kind: e.kind().to_string(),
                        message: e.to_string(),
                    }),
                }
            })
            .collect()
    }

    pub fn prediction(&self, id: &str) -> Option<StoredPrediction> {
        let st = self.state();
        st.prediction_index.get(id).map(|&i| st.labeled(&st.predictions[i]))
    }

    /// Predictions newest first, filtered and paginated.
    pub fn leaks(&self, q: &LeakQuery) -> Result<Page<StoredPrediction>> {
        let limit = q.limit.unwrap_or(100).clamp(1, 1000);
        let st = self.state();
        let mut matched = Vec::new();
        for sp in st.predictions.iter().rev() {
            let p = &sp.prediction;
            if !(q.all || p.positive) {
                continue;
            }
            if q.since.is_some_and(|s| p.ts_ms < s) {
                continue;
            }
            if q.domain.as_deref().is_some_and(|d| !p.domain.eq_ignore_ascii_case(d)) {
                continue;
            }
            if let Some(f) = q.pii.as_deref() {
                if !pii_matches(f, p)? {
                    continue;
                }
            }
            matched.push(sp);
        }
        let total = matched.len();
        let items: Vec<StoredPrediction> = matched.into_iter().skip(q.offset).take(limit).map(|sp| st.labeled(sp)).collect();
        let end = q.offset + items.len();
        Ok(Page { items, total, offset: q.offset, next_offset: (end < total).then_some(end) })
    }

    /// Records a verdict; it takes effect at the next retrain. A user's later
    /// verdict on the same prediction replaces the earlier one.
    pub fn submit_label(&self, mut sub: LabelSubmission) -> Result<LabelReceipt> {
        let _w = self.writer.lock().expect("writer lock poisoned");
        sub.timestamp.get_or_insert_with(now_ms);
        let mut st = self.state();
        let prediction = st
            .prediction_index
            .get(&sub.prediction_id)
            .map(|&i| st.predictions[i].prediction.clone())
            .ok_or_else(|| Error::UnknownPrediction(sub.prediction_id.clone()))?;
        if let Some(l) = sub.leaks.iter().find(|l| l.value.is_empty()) {
            return Err(Error::Label(format!("empty value for {}", l.pii)));
        }
        let label = feedback_label(&sub, &prediction);
        let backfill = match st.history_index.get(&prediction.flow_id) {
            Some(&i) => backfill_count(&label, &st.history[i], &st.history, |id| st.corpus_ids.contains(id)),
            None => 0,
        };
        if let Some(p) = self.path(LABELS) {
            append_jsonl(&p, std::slice::from_ref(&sub))?;
        }
        let key = (sub.user.clone(), sub.prediction_id.clone());
        st.pending.insert(key.clone());
        st.labels.insert(key, sub.clone());
        Ok(LabelReceipt {
            prediction_id: sub.prediction_id,
            flow_id: prediction.flow_id,
            verdict: sub.verdict,
            backfill,
            pending_labels: st.pending.len(),
        })
    }

    /// Applies pending labels to the corpus, retrains, and publishes the new
    /// model set. With nothing pending, reports a no-op.
    pub fn retrain(&self) -> Result<RetrainReport> {
        let _w = self.writer.lock().expect("writer lock poisoned");
        let (mut corpus, history, labels, keys) = {
            let mut st = self.state();
            let keys: Vec<(String, String)> = st.pending.iter().cloned().collect();
            let mut subs: Vec<&LabelSubmission> = keys.iter().filter_map(|k| st.labels.get(k)).collect();
            subs.sort_by_key(|s| s.timestamp.unwrap_or(0));
            let labels: Vec<FeedbackLabel> = subs
                .iter()
                .filter(|s| s.verdict != Verdict::Unknown)
                .filter_map(|s| {
                    let p = &st.predictions[*st.prediction_index.get(&s.prediction_id)?].prediction;
                    Some(feedback_label(s, p))
                })
                .collect();
            if labels.is_empty() {
                st.pending.clear();
                let generation = self.registry.snapshot().generation;
                return Ok(RetrainReport {
                    retrained: false,
                    labels_applied: 0,
                    feedback: FeedbackReport::default(),
                    generation,
                    changed: Vec::new(),
                    deltas: Vec::new(),
                });
            }
            (std::mem::take(&mut st.corpus), st.history.clone(), labels, keys)
        };
        let before = self.registry.snapshot();
        let outcome = apply_feedback(&labels, &mut corpus, &history).and_then(|feedback| {
            let after = self.train_and_store(&corpus)?;
            Ok((feedback, after))
        });
        let (feedback, after) = match outcome {
            Ok(x) => x,
            Err(e) => {
                self.state().corpus = corpus;
                return Err(e);
            }
        };
        let deltas = feedback
            .affected
            .iter()
            .map(|(domain, os)| delta(&before, &after, &corpus, domain, *os))
            .collect();
        let changed = after
            .models
            .values()
            .filter_map(|m| {
                let old = before.models.get(&m.key).map(|o| o.version);
                (old != Some(m.version)).then(|| ModelChange { key: m.key.clone(), old_version: old, new_version: m.version })
            })
            .collect();
        if let Some(p) = self.path("applied_labels.jsonl") {
            append_jsonl(&p, &keys)?;
        }
        {
            let mut st = self.state();
            st.set_corpus(corpus);
            for k in &keys {
                st.pending.remove(k);
            }
        }
        Ok(RetrainReport {
            retrained: true,
            labels_applied: feedback.promoted + feedback.demoted,
            feedback,
            generation: after.generation,
            changed,
            deltas,
        })
    }

    pub fn rules(&self) -> Vec<RewriteRule> {
        self.rules.read().expect("rules lock poisoned").as_ref().clone()
    }

    fn set_rules(&self, rules: Vec<RewriteRule>) -> Result<()> {
        if let Some(p) = self.path(RULES) {
            write_lines(&p, rules.iter().map(|r| serde_json::to_string(r).expect("rules serialize")))?;
        }
        *self.rules.write().expect("rules lock poisoned") = Arc::new(rules);
        Ok(())
    }

    /// Adds a rule. An empty `rule_id` gets a fresh one.
    pub fn add_rule(&self, mut rule: RewriteRule) -> Result<RewriteRule> {
        let _w = self.writer.lock().expect("writer lock poisoned");
        let mut rules = self.rules();
        if rule.rule_id.trim().is_empty() {
            let mut n = rules.len() + 1;
            while rules.iter().any(|r| r.rule_id == format!("r{n}")) {
                n += 1;
            }
            rule.rule_id = format!("r{n}");
        }
        rule.validate()?;
        if rules.iter().any(|r| r.rule_id == rule.rule_id) {
            return Err(Error::DuplicateRule(rule.rule_id));
        }
        rules.push(rule.clone());
        self.set_rules(rules)?;
        Ok(rule)
    }

    pub fn patch_rule(&self, id: &str, patch: RulePatch) -> Result<RewriteRule> {
        let _w = self.writer.lock().expect("writer lock poisoned");
        let mut rules = self.rules();
        let rule = rules.iter_mut().find(|r| r.rule_id == id).ok_or_else(|| Error::UnknownRule(id.to_string()))?;
        if let Some(e) = patch.enabled {
            rule.enabled = e;
        }
        if let Some(s) = patch.scope {
            rule.scope = s;
        }
        if let Some(p) = patch.pii_filter {
            rule.pii_filter = p;
        }
        if let Some(a) = patch.action {
            rule.action = a;
        }
        rule.validate()?;
        let updated = rule.clone();
        self.set_rules(rules)?;
        Ok(updated)
    }

    pub fn delete_rule(&self, id: &str) -> Result<()> {
        let _w = self.writer.lock().expect("writer lock poisoned");
        let mut rules = self.rules();
        let before = rules.len();
        rules.retain(|r| r.rule_id != id);
        if rules.len() == before {
            return Err(Error::UnknownRule(id.to_string()));
        }
        self.set_rules(rules)
    }

    pub fn metrics(&self) -> MetricsReport {
        let generation = self.registry.snapshot().generation;
        let st = self.state();
        let count = st.predictions.len();
        let by = |d: Decision| st.predictions.iter().filter(|p| p.outcome.decision == d).count();
        MetricsReport {
            generation,
            corpus_size: st.corpus.len(),
            predictions: count,
            positive: st.predictions.iter().filter(|p| p.prediction.positive).count(),
            blocked: by(Decision::Blocked),
            modified: by(Decision::Modified),
            pending_labels: st.pending.len(),
            latency: LatencyStats {
                count: count as u64,
                mean_micros: if count == 0 { 0.0 } else { st.latency_sum / count as f64 },
                max_micros: st.latency_max,
            },
            evaluation: st.evaluation.clone(),
        }
    }

    pub fn models(&self) -> ModelsReport {
        let set = self.registry.snapshot();
        ModelsReport { generation: set.generation, models: set.summaries() }
    }
}

fn delta(before: &ModelSet, after: &ModelSet, corpus: &[Example], domain: &str, os: Os) -> ClassifierDelta {
    let rows: Vec<&Example> = corpus.iter().filter(|e| e.flow.flow.domain == domain && e.flow.flow.os == os).collect();
    let errors = |set: &ModelSet| {
        let (mut fp, mut fn_) = (0, 0);
        for e in &rows {
            match (set.classify(&e.flow).positive, e.is_positive()) {
                (true, false) => fp += 1,
                (false, true) => fn_ += 1,
                _ => {}
            }
        }
        (fp, fn_)
    };
    let (fp_before, fn_before) = errors(before);
    let (fp_after, fn_after) = errors(after);
    let key = rows
        .first()
        .and_then(|e| after.model_for(&e.flow.flow))
        .map_or(ClassifierKey::General, |m| m.key.clone());
    ClassifierDelta { key, n: rows.len(), fp_before, fp_after, fn_before, fn_after }
}

/// Reads a flow log and its label file into examples.
pub fn load_labeled(flows: &Path, labels: &Path, tokenizer: &crate::tokenize::Tokenizer) -> Result<Vec<Example>> {
    let mut analyzed = Vec::new();
    for line in read_lines(flows)? {
        analyzed.push(tokenizer.analyze(parse_flow_record(&line)?));
    }
    let labels = read_lines(labels)?.iter().map(|l| GroundTruthLabel::parse_line(l)).collect::<Result<Vec<_>>>()?;
    Ok(label_examples(analyzed, &labels))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate, CorpusSpec, DomainTemplate};
    use crate::tokenize::Tokenizer;

    fn small_corpus() -> Vec<Example> {
        let spec = CorpusSpec {
            domains: vec![DomainTemplate { domain: "applovin.com".into(), os: Some(Os::Android), ..Default::default() }],
            flows_per_domain: 150,
            leak_fraction: 0.3,
            ..Default::default()
        };
        generate(&spec).unwrap().examples(&Tokenizer::default())
    }

    fn engine(dir: Option<&Path>) -> Engine {
        let mut cfg = EngineConfig::default();
        cfg.storage.dir = dir.map(Path::to_path_buf);
        cfg.evaluate_after_training = false;
        Engine::open(cfg).unwrap()
    }

    #[test]
    fn ingest_label_retrain_and_reload() {
        let dir = tempfile::tempdir().unwrap();
        let corpus = small_corpus();
        let e = engine(Some(dir.path()));
        e.train_from(corpus.clone()).unwrap();
        let positive = corpus.iter().find(|x| x.is_positive()).unwrap();
        let p = e.ingest_flow(positive.flow.flow.clone()).unwrap();
        assert!(p.prediction.positive);
        assert_eq!(p.prediction.extracted.len(), 1);
        assert!(matches!(
            e.submit_label(LabelSubmission {
                prediction_id: "nope".into(),
                verdict: Verdict::Wrong,
                user: "u".into(),
                timestamp: None,
                leaks: vec![]
            }),
            Err(Error::UnknownPrediction(_))
        ));
        let receipt = e
            .submit_label(LabelSubmission {
                prediction_id: p.prediction.prediction_id.clone(),
                verdict: Verdict::Correct,
                user: "u".into(),
                timestamp: None,
                leaks: vec![],
            })
            .unwrap();
        assert_eq!(receipt.pending_labels, 1);
        let report = e.retrain().unwrap();
        assert!(report.retrained);
        assert_eq!(report.labels_applied, 1);
        assert!(!e.retrain().unwrap().retrained);
        drop(e);

        let again = engine(Some(dir.path()));
        let reloaded = again.prediction(&p.prediction.prediction_id).unwrap();
        assert_eq!(reloaded.label, Some(Verdict::Correct));
        assert_eq!(StoredPrediction { label: None, ..reloaded }, p);
        assert_eq!(again.metrics().pending_labels, 0);
        assert_eq!(again.models().generation, 2);
        let next = again.ingest_flow(positive.flow.flow.clone()).unwrap();
        assert_ne!(next.prediction.prediction_id, p.prediction.prediction_id);
    }

    #[test]
    fn rules_apply_to_later_ingest() {
        let e = engine(None);
        e.train_from(small_corpus()).unwrap();
        let rule: RewriteRule = serde_json::from_str(
            r#"{"rule_id":"","scope":{"ByDomain":"applovin.com"},"action":{"Replace":"XXXX"},"created_by":"u"}"#,
        )
        .unwrap();
        let rule = e.add_rule(rule).unwrap();
        assert_eq!(rule.rule_id, "r1");
        assert!(matches!(e.add_rule(rule.clone()), Err(Error::DuplicateRule(_))));
        let flow = small_corpus().into_iter().find(|x| x.is_positive()).unwrap().flow.flow;
        let out = e.ingest_flow(flow.clone()).unwrap();
        assert_eq!(out.outcome.decision, Decision::Modified);
        assert!(out.outcome.modified_flow.unwrap().query.contains("idfa=XXXX"));

        let patched = e.patch_rule("r1", serde_json::from_str(r#"{"action":"Block"}"#).unwrap()).unwrap();
        assert_eq!(patched.action, RuleAction::Block);
        assert_eq!(e.ingest_flow(flow.clone()).unwrap().outcome.decision, Decision::Blocked);
        assert!(matches!(
            e.patch_rule("r1", serde_json::from_str(r#"{"action":{"Replace":""}}"#).unwrap()),
            Err(Error::InvalidRule(_))
        ));
        e.delete_rule("r1").unwrap();
        assert!(matches!(e.delete_rule("r1"), Err(Error::UnknownRule(_))));
        assert_eq!(e.ingest_flow(flow).unwrap().outcome.decision, Decision::Pass);
    }

    #[test]
    fn leak_queries_filter_and_page() {
        let e = engine(None);
        let corpus = small_corpus();
        e.train_from(corpus.clone()).unwrap();
        for x in corpus.iter().take(40) {
            e.ingest_flow(x.flow.flow.clone()).unwrap();
        }
        let positives = corpus.iter().take(40).filter(|x| x.is_positive()).count();
        let page = e.leaks(&LeakQuery { limit: Some(5), ..Default::default() }).unwrap();
        assert_eq!(page.total, positives);
        assert_eq!(page.items.len(), 5.min(positives));
        let all = e.leaks(&LeakQuery { all: true, limit: Some(1000), ..Default::default() }).unwrap();
        assert_eq!(all.total, 40);
        let dev = e.leaks(&LeakQuery { pii: Some("DeviceIdentifier".into()), ..Default::default() }).unwrap();
        assert_eq!(dev.total, positives);
        let cred = e.leaks(&LeakQuery { pii: Some("Credential".into()), ..Default::default() }).unwrap();
        assert_eq!(cred.total, 0);
        assert!(matches!(e.leaks(&LeakQuery { pii: Some("bogus".into()), ..Default::default() }), Err(Error::InvalidQuery(_))));
    }

    #[test]
    fn malformed_records_do_not_stop_the_batch() {
        let e = engine(None);
        let good = small_corpus()[0].flow.flow.to_record();
        let items = e.ingest_records(vec![serde_json::json!({"id": 3}), serde_json::to_value(&good).unwrap()]);
        assert!(matches!(&items[0], IngestItem::Error(err) if err.status == 400 && err.index == 0));
        assert!(matches!(&items[1], IngestItem::Ok(_)));
    }
}
