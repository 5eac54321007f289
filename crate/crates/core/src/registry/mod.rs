//! Per-(domain, OS) classifiers plus a general fallback: training, dispatch,
//! evaluation and persistence.

mod bundle;
mod feedback;
mod kfold;
mod metrics;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;
use std::sync::{Arc, RwLock};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::extract::{Extraction, ExtractorConfig, SuspiciousKeyTable};
use crate::features::{prepare_training, FeatureVocabulary, VocabularyConfig};
use crate::flow::{Example, Flow, Os, PiiType};
use crate::tokenize::{AnalyzedFlow, Tokenizer, TokenizerConfig};
use crate::tree::{DecisionTree, TrainConfig};

pub use feedback::{apply_feedback, backfill_count, FeedbackLabel, FeedbackReport, Verdict};
pub use kfold::{
    compare_with_general, kfold_evaluate, stratified_folds, ClassifierEvaluation, EvaluationReport, GeneralComparison,
};
pub use metrics::{auc, Confusion, Metrics};

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ClassifierKey {
    Pdao { domain: String, os: Os },
    General,
}

impl ClassifierKey {
    pub fn pdao(domain: &str, os: Os) -> Self {
        ClassifierKey::Pdao { domain: domain.to_string(), os }
    }

    fn file_name(&self) -> String {
        match self {
            ClassifierKey::Pdao { domain, os } => format!("pdao__{domain}__{os}.json"),
            ClassifierKey::General => "general.json".to_string(),
        }
    }
}

impl fmt::Display for ClassifierKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ClassifierKey::Pdao { domain, os } => write!(f, "{domain}/{os}"),
            ClassifierKey::General => f.write_str("general"),
        }
    }
}

impl FromStr for ClassifierKey {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        if s == "general" {
            return Ok(ClassifierKey::General);
        }
        let (domain, os) = s.rsplit_once('/').ok_or_else(|| format!("bad classifier key `{s}`"))?;
        Ok(ClassifierKey::Pdao { domain: domain.to_string(), os: os.parse()? })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RegistryConfig {
    pub pdao_min_samples: usize,
    pub pdao_min_positive: usize,
    pub general_negative_sampling: f64,
    pub kfold_k: usize,
    pub rng_seed: u64,
}

impl Default for RegistryConfig {
    fn default() -> Self {
        RegistryConfig {
            pdao_min_samples: 101,
            pdao_min_positive: 1,
            general_negative_sampling: 0.1,
            kfold_k: 10,
            rng_seed: 0x5eed,
        }
    }
}

impl RegistryConfig {
    pub fn validate(&self) -> Result<()> {
        let r = self.general_negative_sampling;
        if !(r > 0.0 && r <= 1.0) {
            return Err(Error::Config("registry.general_negative_sampling must be in (0, 1]".into()));
        }
        if self.kfold_k < 2 {
            return Err(Error::Config("registry.kfold_k must be at least 2".into()));
        }
        Ok(())
    }
}

/// Everything that shapes a trained model.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub tokenizer: TokenizerConfig,
    pub vocabulary: VocabularyConfig,
    pub train: TrainConfig,
    pub registry: RegistryConfig,
    pub extractor: ExtractorConfig,
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        Tokenizer::new(self.tokenizer.clone())?;
        self.vocabulary.validate()?;
        self.train.validate()?;
        self.registry.validate()?;
        self.extractor.validate()
    }
}

/// Labeled sample counts per (domain, OS).
pub type CorpusStats = BTreeMap<(String, Os), (usize, usize)>;

pub fn corpus_stats(examples: &[Example]) -> CorpusStats {
    let mut stats = CorpusStats::new();
    for ex in examples {
        let f = &ex.flow.flow;
        let e = stats.entry((f.domain.clone(), f.os)).or_default();
        e.0 += 1;
        if ex.is_positive() {
            e.1 += 1;
        }
    }
    stats
}

/// The classifier a labeled flow trains: its (domain, OS) model when that
/// pair has at least `pdao_min_samples` samples and `pdao_min_positive`
/// positives, otherwise the general one.
pub fn assign_classifier(flow: &Flow, cfg: &RegistryConfig, stats: &CorpusStats) -> ClassifierKey {
    if flow.domain.is_empty() || flow.os == Os::Unknown {
        return ClassifierKey::General;
    }
    match stats.get(&(flow.domain.clone(), flow.os)) {
        Some(&(n, pos)) if n >= cfg.pdao_min_samples && pos >= cfg.pdao_min_positive.max(1) => {
            ClassifierKey::pdao(&flow.domain, flow.os)
        }
        _ => ClassifierKey::General,
    }
}

/// Example indices per classifier.
pub fn group_examples(examples: &[Example], cfg: &RegistryConfig) -> BTreeMap<ClassifierKey, Vec<usize>> {
    let stats = corpus_stats(examples);
    let mut groups: BTreeMap<ClassifierKey, Vec<usize>> = BTreeMap::new();
    for (i, ex) in examples.iter().enumerate() {
        groups.entry(assign_classifier(&ex.flow.flow, cfg, &stats)).or_default().push(i);
    }
    groups
}

/// Deterministic per-classifier seed.
pub fn key_seed(base: u64, key: &ClassifierKey) -> u64 {
    let d = Sha256::digest(format!("{base}:{key}").as_bytes());
    u64::from_le_bytes(d[..8].try_into().expect("digest is 32 bytes"))
}

/// Keeps every positive and exactly `round(n_neg * rate)` negatives chosen
/// by `seed`, preserving order.
pub fn undersample_negatives(examples: &[&Example], rate: f64, seed: u64) -> Vec<usize> {
    let neg: Vec<usize> = (0..examples.len()).filter(|&i| !examples[i].is_positive()).collect();
    let keep = ((neg.len() as f64) * rate).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let chosen: BTreeSet<usize> =
        rand::seq::index::sample(&mut rng, neg.len(), keep.min(neg.len())).into_iter().map(|j| neg[j]).collect();
    (0..examples.len()).filter(|i| examples[*i].is_positive() || chosen.contains(i)).collect()
}

/// One trained classifier.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Model {
    pub key: ClassifierKey,
    pub version: u64,
    pub seed: u64,
    /// Digest of the training rows and configuration; unchanged digest means
    /// an unchanged model.
    pub digest: String,
    pub vocabulary: FeatureVocabulary,
    pub tree: DecisionTree,
    pub positive_kinds: BTreeSet<PiiType>,
    pub n_train: usize,
    pub n_train_positive: usize,
}

fn training_digest(key: &ClassifierKey, seed: u64, cfg: &PipelineConfig, rows: &[&Example]) -> String {
    let mut h = Sha256::new();
    h.update(format!("{key}\n{seed}\n").as_bytes());
    h.update(serde_json::to_string(&(&cfg.tokenizer, &cfg.vocabulary, &cfg.train)).unwrap_or_default().as_bytes());
    for ex in rows {
        h.update(ex.id().as_bytes());
        h.update(b"\x1f");
        let mut leaks: Vec<String> = ex.leaks.iter().map(|l| format!("{}={}", l.pii, l.value)).collect();
        leaks.sort();
        h.update(leaks.join("\x1e").as_bytes());
        h.update(b"\n");
    }
    h.finalize().iter().take(16).map(|b| format!("{b:02x}")).collect()
}

/// Trains one classifier on `rows`.
pub fn train_model(
    key: ClassifierKey,
    rows: &[&Example],
    seed: u64,
    cfg: &PipelineConfig,
    tokenizer: &Tokenizer,
) -> Result<Model> {
    let digest = training_digest(&key, seed, cfg, rows);
    let owned: Vec<Example> = rows.iter().map(|e| (*e).clone()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let prepared = prepare_training(&owned, &cfg.vocabulary, tokenizer, &mut rng);
    let tree = if prepared.set.is_empty() {
        DecisionTree::negative_leaf(&prepared.vocabulary.words)
    } else {
        DecisionTree::train(&prepared.set, &cfg.train)?
    };
    let positive_kinds = rows.iter().flat_map(|e| e.leaks.iter().map(|l| l.pii)).collect();
    Ok(Model {
        key,
        version: 1,
        seed,
        digest,
        vocabulary: prepared.vocabulary,
        tree,
        positive_kinds,
        n_train: prepared.set.len(),
        n_train_positive: prepared.set.n_positive(),
    })
}

/// A complete, immutable set of classifiers with their extraction table.
#[derive(Debug, Clone, Default)]
pub struct ModelSet {
    pub generation: u64,
    pub models: BTreeMap<ClassifierKey, Model>,
    pub table: SuspiciousKeyTable,
}

/// Version summary of one model, as listed by the service.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSummary {
    pub key: ClassifierKey,
    pub version: u64,
    pub digest: String,
    pub vocab_hash: String,
    pub n_features: usize,
    pub n_train: usize,
    pub n_train_positive: usize,
    pub root_word: Option<String>,
    pub depth: usize,
}

/// Rows each classifier trains on: its group, with general negatives undersampled.
pub fn training_rows<'a>(
    examples: &'a [Example],
    cfg: &PipelineConfig,
) -> BTreeMap<ClassifierKey, (u64, Vec<&'a Example>)> {
    let mut out = BTreeMap::new();
    for (key, idx) in group_examples(examples, &cfg.registry) {
        let seed = key_seed(cfg.registry.rng_seed, &key);
        let rows: Vec<&Example> = idx.iter().map(|&i| &examples[i]).collect();
        let rows = if key == ClassifierKey::General {
            undersample_negatives(&rows, cfg.registry.general_negative_sampling, seed)
                .into_iter()
                .map(|i| rows[i])
                .collect()
        } else {
            rows
        };
        out.insert(key, (seed, rows));
    }
    out
}

impl ModelSet {
    /// Trains every classifier. Models whose training digest matches the one
    /// in `previous` are reused with their version; changed ones get the next
    /// version.
    pub fn train(examples: &[Example], cfg: &PipelineConfig, previous: Option<&ModelSet>) -> Result<ModelSet> {
        cfg.validate()?;
        let tokenizer = Tokenizer::new(cfg.tokenizer.clone())?;
        let plan = training_rows(examples, cfg);
        let mut models = BTreeMap::new();
        let trained: Vec<Result<Model>> = std::thread::scope(|s| {
            let handles: Vec<_> = plan
                .iter()
                .map(|(key, (seed, rows))| {
                    let tokenizer = &tokenizer;
                    let prev = previous.and_then(|p| p.models.get(key));
                    s.spawn(move || {
                        let digest = training_digest(key, *seed, cfg, rows);
                        match prev {
                            Some(m) if m.digest == digest => Ok(m.clone()),
                            _ => {
                                let mut m = train_model(key.clone(), rows, *seed, cfg, tokenizer)?;
                                m.version = prev.map_or(1, |p| p.version + 1);
                                Ok(m)
                            }
                        }
                    })
                })
                .collect();
            handles.into_iter().map(|h| h.join().expect("training thread panicked")).collect()
        });
        for m in trained {
            let m = m?;
            models.insert(m.key.clone(), m);
        }
        let mut table = SuspiciousKeyTable::build(examples, &cfg.extractor);
        for (key, m) in &models {
            if let Some(root) = m.tree.root_word() {
                let group: Vec<Example> = plan[key].1.iter().map(|e| (*e).clone()).collect();
                table.augment_with_root(root, &m.positive_kinds, &group);
            }
        }
        let generation = previous.map_or(1, |p| p.generation + 1);
        Ok(ModelSet { generation, models, table })
    }

    /// The model that serves `flow`: its (domain, OS) model, else the general one.
    pub fn model_for(&self, flow: &Flow) -> Option<&Model> {
        let key = ClassifierKey::Pdao { domain: flow.domain.clone(), os: flow.os };
        self.models.get(&key).or_else(|| self.models.get(&ClassifierKey::General))
    }

    /// Predicts and, for positives, extracts the leaking pairs.
    pub fn classify(&self, af: &AnalyzedFlow) -> PredictionRecord {
        let started = Instant::now();
        let flow = &af.flow;
        let mut rec = PredictionRecord {
            prediction_id: flow.id.clone(),
            flow_id: flow.id.clone(),
            ts_ms: flow.ts_ms,
            domain: flow.domain.clone(),
            os: flow.os,
            app_id: flow.app_id.clone(),
            classifier_key: ClassifierKey::General,
            positive: false,
            score: 0.0,
            extracted: Vec::new(),
            model_version: 0,
            generation: self.generation,
            unmodeled: true,
            unextracted: false,
            micros: 0.0,
        };
        if let Some(model) = self.model_for(flow) {
            let v = model.vocabulary.vectorize(&af.tokens);
            let (positive, score) = model.tree.predict(&v).unwrap_or((false, 0.0));
            rec.classifier_key = model.key.clone();
            rec.model_version = model.version;
            rec.unmodeled = false;
            rec.positive = positive;
            rec.score = score;
            if positive {
                rec.extracted = self.table.extract(flow);
                rec.unextracted = rec.extracted.is_empty();
            }
        }
        rec.micros = started.elapsed().as_secs_f64() * 1e6;
        rec
    }

    pub fn summaries(&self) -> Vec<ModelSummary> {
        self.models
            .values()
            .map(|m| ModelSummary {
                key: m.key.clone(),
                version: m.version,
                digest: m.digest.clone(),
                vocab_hash: m.tree.vocab_hash.clone(),
                n_features: m.vocabulary.len(),
                n_train: m.n_train,
                n_train_positive: m.n_train_positive,
                root_word: m.tree.root_word().map(String::from),
                depth: m.tree.root.depth(),
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub prediction_id: String,
    pub flow_id: String,
    pub ts_ms: i64,
    pub domain: String,
    pub os: Os,
    pub app_id: Option<String>,
    pub classifier_key: ClassifierKey,
    pub positive: bool,
    pub score: f64,
    pub extracted: Vec<Extraction>,
    pub model_version: u64,
    pub generation: u64,
    /// No model could serve the flow.
    pub unmodeled: bool,
    /// Predicted positive but no pair was extracted.
    pub unextracted: bool,
    /// Vectorize + predict + extract wall time.
    pub micros: f64,
}

/// Holds the live [`ModelSet`]; readers get a consistent snapshot while a
/// retrain publishes a replacement.
#[derive(Debug)]
pub struct Registry {
    config: PipelineConfig,
    tokenizer: Tokenizer,
    current: RwLock<Arc<ModelSet>>,
}

impl Registry {
    pub fn new(config: PipelineConfig) -> Result<Registry> {
        config.validate()?;
        let tokenizer = Tokenizer::new(config.tokenizer.clone())?;
        Ok(Registry { config, tokenizer, current: RwLock::new(Arc::new(ModelSet::default())) })
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.config
    }

    pub fn tokenizer(&self) -> &Tokenizer {
        &self.tokenizer
    }

    pub fn snapshot(&self) -> Arc<ModelSet> {
        self.current.read().expect("model lock poisoned").clone()
    }

    pub fn publish(&self, set: ModelSet) -> Arc<ModelSet> {
        let set = Arc::new(set);
        *self.current.write().expect("model lock poisoned") = set.clone();
        set
    }

    /// Retrains against `examples` and publishes the result.
    pub fn train_all(&self, examples: &[Example]) -> Result<Arc<ModelSet>> {
        let prev = self.snapshot();
        let prev = (!prev.models.is_empty()).then_some(prev.as_ref());
        let set = ModelSet::train(examples, &self.config, prev)?;
        Ok(self.publish(set))
    }

    pub fn analyze(&self, flow: Flow) -> AnalyzedFlow {
        self.tokenizer.analyze(flow)
    }

    pub fn classify(&self, af: &AnalyzedFlow) -> PredictionRecord {
        self.snapshot().classify(af)
    }
}
