//! Stratified k-fold evaluation.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::metrics::Metrics;
use super::{key_seed, train_model, training_rows, undersample_negatives, ClassifierKey, ModelSet, PipelineConfig};
use crate::error::{Error, Result};
use crate::flow::Example;
use crate::tokenize::Tokenizer;

/// Test-index sets for k-fold evaluation, stratified by label.
///
/// Positives and negatives are shuffled separately and dealt round-robin
/// into `k` folds. With fewer than `k` positives (but at least one) each
/// positive gets its own fold and negatives are dealt across those folds.
/// Folds are disjoint, cover every index, and none is empty.
pub fn stratified_folds(labels: &[bool], k: usize, seed: u64) -> Vec<Vec<usize>> {
    let n = labels.len();
    if n == 0 {
        return Vec::new();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pos: Vec<usize> = (0..n).filter(|&i| labels[i]).collect();
    let mut neg: Vec<usize> = (0..n).filter(|&i| !labels[i]).collect();
    pos.shuffle(&mut rng);
    neg.shuffle(&mut rng);
    let k = if !pos.is_empty() && pos.len() < k { pos.len() } else { k.min(n) }.max(1);
    let mut folds = vec![Vec::new(); k];
    // deal positives first, then continue the rotation with negatives
    for (j, &i) in pos.iter().chain(neg.iter()).enumerate() {
        folds[j % k].push(i);
    }
    folds.retain(|f| !f.is_empty());
    for f in &mut folds {
        f.sort_unstable();
    }
    folds
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierEvaluation {
    pub key: ClassifierKey,
    pub n: usize,
    pub n_positive: usize,
    pub folds: usize,
    pub metrics: Metrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub k: usize,
    pub per_classifier: Vec<ClassifierEvaluation>,
    /// Pooled over every tested flow.
    pub flow_weighted: Metrics,
    /// Unweighted mean over classifiers.
    pub classifier_weighted_ccr: f64,
    pub classifier_weighted_auc: f64,
}

impl EvaluationReport {
    pub fn get(&self, key: &ClassifierKey) -> Option<&ClassifierEvaluation> {
        self.per_classifier.iter().find(|c| &c.key == key)
    }
}

/// One test row: (predicted, score, actual, micros).
type Scored = (bool, f64, bool, f64);

fn evaluate_group(
    key: &ClassifierKey,
    rows: &[&Example],
    cfg: &PipelineConfig,
    tokenizer: &Tokenizer,
    k: usize,
) -> Result<(ClassifierEvaluation, Vec<Scored>)> {
    let seed = key_seed(cfg.registry.rng_seed, key);
    let labels: Vec<bool> = rows.iter().map(|e| e.is_positive()).collect();
    let folds = stratified_folds(&labels, k, seed);
    let mut results = Vec::with_capacity(rows.len());
    for (fi, test) in folds.iter().enumerate() {
        let mut in_test = vec![false; rows.len()];
        for &i in test {
            in_test[i] = true;
        }
        let mut train: Vec<&Example> = (0..rows.len()).filter(|&i| !in_test[i]).map(|i| rows[i]).collect();
        if train.is_empty() {
            continue;
        }
        let fold_seed = seed.wrapping_add(fi as u64 + 1);
        if *key == ClassifierKey::General {
            train = undersample_negatives(&train, cfg.registry.general_negative_sampling, fold_seed)
                .into_iter()
                .map(|i| train[i])
                .collect();
        }
        let model = train_model(key.clone(), &train, fold_seed, cfg, tokenizer)?;
        for &i in test {
            let started = Instant::now();
            let v = model.vocabulary.vectorize(&rows[i].flow.tokens);
            let (p, s) = model.tree.predict(&v)?;
            let micros = started.elapsed().as_secs_f64() * 1e6;
            results.push((p, s, labels[i], micros));
        }
    }
    let metrics = Metrics::from_predictions(&results);
    let eval = ClassifierEvaluation {
        key: key.clone(),
        n: rows.len(),
        n_positive: labels.iter().filter(|l| **l).count(),
        folds: folds.len(),
        metrics,
    };
    Ok((eval, results))
}

/// k-fold evaluation of every classifier `train_all` would build. The
/// general classifier's training folds are undersampled like in training;
/// its test folds are not.
pub fn kfold_evaluate(examples: &[Example], cfg: &PipelineConfig, k: usize) -> Result<EvaluationReport> {
    if k < 2 {
        return Err(Error::Evaluation(format!("k must be at least 2, got {k}")));
    }
    cfg.validate()?;
    let tokenizer = Tokenizer::new(cfg.tokenizer.clone())?;
    let groups = super::group_examples(examples, &cfg.registry);
    let outcomes: Vec<Result<(ClassifierEvaluation, Vec<Scored>)>> = std::thread::scope(|s| {
        let handles: Vec<_> = groups
            .iter()
            .filter(|(_, idx)| idx.len() >= 2)
            .map(|(key, idx)| {
                let rows: Vec<&Example> = idx.iter().map(|&i| &examples[i]).collect();
                let tokenizer = &tokenizer;
                s.spawn(move || evaluate_group(key, &rows, cfg, tokenizer, k))
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("evaluation thread panicked")).collect()
    });
    let mut per_classifier = Vec::new();
    let mut pooled = Vec::new();
    for o in outcomes {
        let (eval, rows) = o?;
        per_classifier.push(eval);
        pooled.extend(rows);
    }
    let m = per_classifier.len().max(1) as f64;
    let classifier_weighted_ccr = per_classifier.iter().map(|c| c.metrics.ccr).sum::<f64>() / m;
    let classifier_weighted_auc = per_classifier.iter().map(|c| c.metrics.auc).sum::<f64>() / m;
    Ok(EvaluationReport {
        k,
        per_classifier,
        flow_weighted: Metrics::from_predictions(&pooled),
        classifier_weighted_ccr,
        classifier_weighted_auc,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneralComparison {
    pub key: ClassifierKey,
    /// Held-out CCR of the (domain, OS) classifier.
    pub pdao_ccr: f64,
    /// CCR of the general classifier on the same flows, none of which it trained on.
    pub general_ccr: f64,
}

impl GeneralComparison {
    pub fn pdao_wins(&self) -> bool {
        self.pdao_ccr > self.general_ccr
    }
}

/// Compares each (domain, OS) classifier's k-fold CCR in `report` against
/// the general classifier trained on the remaining domains, applied to that
/// classifier's flows.
pub fn compare_with_general(
    examples: &[Example],
    cfg: &PipelineConfig,
    report: &EvaluationReport,
) -> Result<Vec<GeneralComparison>> {
    let tokenizer = Tokenizer::new(cfg.tokenizer.clone())?;
    let plan = training_rows(examples, cfg);
    let general = match plan.get(&ClassifierKey::General) {
        Some((seed, rows)) => train_model(ClassifierKey::General, rows, *seed, cfg, &tokenizer)?,
        None => return Err(Error::Evaluation("no flows left for a general classifier".into())),
    };
    let set = ModelSet {
        generation: 0,
        models: [(ClassifierKey::General, general)].into_iter().collect(),
        table: Default::default(),
    };
    let mut out = Vec::new();
    for (key, (_, rows)) in plan.iter().filter(|(k, _)| **k != ClassifierKey::General) {
        let Some(eval) = report.get(key) else { continue };
        let mut c = super::Confusion::default();
        for ex in rows {
            c.add(set.classify(&ex.flow).positive, ex.is_positive());
        }
        out.push(GeneralComparison { key: key.clone(), pdao_ccr: eval.metrics.ccr, general_ccr: c.ccr() });
    }
    Ok(out)
}
