//! Turning user verdicts into training rows.

use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::{Example, Leak, Os};
use crate::tokenize::AnalyzedFlow;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Verdict {
    #[serde(alias = "correct")]
    Correct,
    #[serde(alias = "wrong")]
    Wrong,
    #[serde(alias = "unknown")]
    Unknown,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeedbackLabel {
    pub flow_id: String,
    pub verdict: Verdict,
    /// Leaks the user confirmed (for `Correct`).
    #[serde(default)]
    pub leaks: Vec<Leak>,
    /// Values the prediction flagged (for `Wrong`).
    #[serde(default)]
    pub flagged_values: Vec<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FeedbackReport {
    pub promoted: usize,
    pub demoted: usize,
    /// Historical flows added as positives because they carry a confirmed value.
    pub backfilled_positive: usize,
    /// Historical flows added as negatives because they carry a value marked wrong.
    pub backfilled_negative: usize,
    pub affected: BTreeSet<(String, Os)>,
}

impl FeedbackReport {
    pub fn is_empty(&self) -> bool {
        self.promoted + self.demoted == 0
    }
}

struct Corpus<'a> {
    rows: &'a mut Vec<Example>,
    index: HashMap<String, usize>,
}

impl Corpus<'_> {
    fn upsert_positive(&mut self, flow: &AnalyzedFlow, leaks: &[Leak]) {
        match self.index.get(&flow.flow.id) {
            Some(&i) => {
                for l in leaks {
                    if !self.rows[i].leaks.contains(l) {
                        self.rows[i].leaks.push(l.clone());
                    }
                }
            }
            None => self.push(Example { flow: flow.clone(), leaks: leaks.to_vec() }),
        }
    }

    fn set_negative(&mut self, flow: &AnalyzedFlow) {
        match self.index.get(&flow.flow.id) {
            Some(&i) => self.rows[i].leaks.clear(),
            None => self.push(Example { flow: flow.clone(), leaks: Vec::new() }),
        }
    }

    fn push(&mut self, ex: Example) {
        self.index.insert(ex.id().to_string(), self.rows.len());
        self.rows.push(ex);
    }
}

fn same_pair(a: &AnalyzedFlow, b: &AnalyzedFlow) -> bool {
    a.flow.id != b.flow.id && a.flow.domain == b.flow.domain && a.flow.os == b.flow.os
}

/// Whether `candidate` would be backfilled by `label`, given the labeled
/// `flow`. Labeled-ness of the candidate is checked by the caller.
fn backfills(label: &FeedbackLabel, flow: &AnalyzedFlow, candidate: &AnalyzedFlow) -> bool {
    if !same_pair(flow, candidate) {
        return false;
    }
    match label.verdict {
        Verdict::Correct => confirmed(label).any(|l| candidate.tokens.text.contains(&l.value)),
        Verdict::Wrong => candidate
            .flow
            .kv_pairs
            .iter()
            .any(|p| label.flagged_values.iter().any(|v| !v.is_empty() && *v == p.value)),
        Verdict::Unknown => false,
    }
}

fn confirmed(label: &FeedbackLabel) -> impl Iterator<Item = &Leak> {
    label.leaks.iter().filter(|l| !l.value.is_empty())
}

/// Number of flows in `history` that applying `label` would add to the
/// corpus, not counting the labeled flow itself.
pub fn backfill_count(
    label: &FeedbackLabel,
    flow: &AnalyzedFlow,
    history: &[AnalyzedFlow],
    is_labeled: impl Fn(&str) -> bool,
) -> usize {
    history
        .iter()
        .filter(|h| backfills(label, flow, h))
        .filter(|h| label.verdict == Verdict::Correct || !is_labeled(&h.flow.id))
        .count()
}

/// Applies verdicts to `corpus`.
///
/// `Correct` adds the flow as a positive with the confirmed leaks, then adds
/// every flow in `history` to the same (domain, OS) whose text contains a
/// confirmed value. `Wrong` makes the flow a negative, then adds as
/// negatives the unlabeled historical flows of the same (domain, OS) where a
/// key carries exactly a flagged value. `Unknown` changes nothing.
pub fn apply_feedback(labels: &[FeedbackLabel], corpus: &mut Vec<Example>, history: &[AnalyzedFlow]) -> Result<FeedbackReport> {
    let by_id: HashMap<&str, &AnalyzedFlow> = history.iter().map(|f| (f.flow.id.as_str(), f)).collect();
    let index = corpus.iter().enumerate().map(|(i, e)| (e.id().to_string(), i)).collect();
    let mut c = Corpus { rows: corpus, index };
    let mut report = FeedbackReport::default();
    for label in labels {
        let flow: AnalyzedFlow = match by_id.get(label.flow_id.as_str()) {
            Some(f) => (*f).clone(),
            None => match c.index.get(&label.flow_id) {
                Some(&i) => c.rows[i].flow.clone(),
                None => return Err(Error::UnknownFlow(label.flow_id.clone())),
            },
        };
        match label.verdict {
            Verdict::Correct => {
                let leaks: Vec<Leak> = confirmed(label).cloned().collect();
                if leaks.is_empty() {
                    log::warn!("verdict for {} confirms no value; ignored", label.flow_id);
                    continue;
                }
                c.upsert_positive(&flow, &leaks);
                report.promoted += 1;
                for h in history.iter().filter(|h| backfills(label, &flow, h)) {
                    let found: Vec<Leak> = leaks.iter().filter(|l| h.tokens.text.contains(&l.value)).cloned().collect();
                    c.upsert_positive(h, &found);
                    report.backfilled_positive += 1;
                }
            }
            Verdict::Wrong => {
                c.set_negative(&flow);
                report.demoted += 1;
                for h in history.iter().filter(|h| backfills(label, &flow, h)) {
                    if !c.index.contains_key(&h.flow.id) {
                        c.set_negative(h);
                        report.backfilled_negative += 1;
                    }
                }
            }
            Verdict::Unknown => continue,
        }
        report.affected.insert((flow.flow.domain.clone(), flow.flow.os));
    }
    Ok(report)
}
