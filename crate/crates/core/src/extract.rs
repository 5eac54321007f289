//! Locating the leaking key/value pairs of a positive flow.
//!
//! Each (PII kind, key) pair gets a probability `P = k_pii / k_all`, where
//! `k_pii` counts flows in which the key carried a leaked value of that kind
//! and `k_all` counts flows containing the key. Keys above the threshold are
//! suspicious. Keys matching a classifier's root word are boosted to
//! `root_bonus_p`.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::{Example, Flow, PiiType, Span};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExtractorConfig {
    pub threshold: f64,
    pub root_bonus_p: f64,
}

impl Default for ExtractorConfig {
    fn default() -> Self {
        ExtractorConfig { threshold: 0.2, root_bonus_p: 1.0 }
    }
}

impl ExtractorConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.threshold) {
            return Err(Error::Config("extractor.threshold must be in [0, 1]".into()));
        }
        if !(0.0..=1.0).contains(&self.root_bonus_p) {
            return Err(Error::Config("extractor.root_bonus_p must be in [0, 1]".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KeyStat {
    pub pii: PiiType,
    pub k_pii: usize,
    pub k_all: usize,
    pub p: f64,
    /// Set when the entry was raised to the root bonus.
    #[serde(default)]
    pub from_root: bool,
}

/// One extracted leak; `span` indexes [`Flow::kv_text`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Extraction {
    pub pii: PiiType,
    pub key: String,
    pub value: String,
    pub span: Span,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct SuspiciousKeyTable {
    /// Lowercased key to its per-kind statistics.
    pub entries: BTreeMap<String, Vec<KeyStat>>,
    pub threshold: f64,
    pub root_bonus_p: f64,
}

/// Whether a pair's value carries `leak`.
fn carries(value: &str, leak: &str) -> bool {
    !leak.is_empty() && value.contains(leak)
}

fn last_segment(key: &str) -> &str {
    key.rsplit('.').next().unwrap_or(key)
}

impl SuspiciousKeyTable {
    pub fn build(examples: &[Example], config: &ExtractorConfig) -> Self {
        let mut k_all: BTreeMap<String, usize> = BTreeMap::new();
        let mut k_pii: BTreeMap<(String, PiiType), usize> = BTreeMap::new();
        for ex in examples {
            let flow = &ex.flow.flow;
            let keys: BTreeSet<String> =
                flow.kv_pairs.iter().filter(|p| !p.key.is_empty()).map(|p| p.key.to_lowercase()).collect();
            for k in &keys {
                *k_all.entry(k.clone()).or_default() += 1;
            }
            let mut hits: BTreeSet<(String, PiiType)> = BTreeSet::new();
            for leak in &ex.leaks {
                for p in flow.kv_pairs.iter().filter(|p| !p.key.is_empty()) {
                    if carries(&p.value, &leak.value) {
                        hits.insert((p.key.to_lowercase(), leak.pii));
                    }
                }
            }
            for h in hits {
                *k_pii.entry(h).or_default() += 1;
            }
        }
        let mut entries: BTreeMap<String, Vec<KeyStat>> = BTreeMap::new();
        for ((key, pii), n) in k_pii {
            let all = k_all[&key];
            entries.entry(key).or_default().push(KeyStat { pii, k_pii: n, k_all: all, p: n as f64 / all as f64, from_root: false });
        }
        SuspiciousKeyTable { entries, threshold: config.threshold, root_bonus_p: config.root_bonus_p }
    }

    /// Raises keys named like `root_word` (whole key or last dotted segment)
    /// to `root_bonus_p` for each kind in `kinds`. Only keys that occur in
    /// `examples` are considered. Returns the number of entries touched.
    pub fn augment_with_root(&mut self, root_word: &str, kinds: &BTreeSet<PiiType>, examples: &[Example]) -> usize {
        let root = root_word.to_lowercase();
        let keys: BTreeSet<String> = examples
            .iter()
            .flat_map(|e| e.flow.flow.kv_pairs.iter())
            .map(|p| p.key.to_lowercase())
            .filter(|k| !k.is_empty() && (k == &root || last_segment(k) == root))
            .collect();
        let mut touched = 0;
        for key in keys {
            let list = self.entries.entry(key).or_default();
            for &pii in kinds {
                match list.iter_mut().find(|s| s.pii == pii) {
                    Some(s) => {
                        if s.p < self.root_bonus_p {
                            s.p = self.root_bonus_p;
                        }
                        s.from_root = true;
                    }
                    None => list.push(KeyStat { pii, k_pii: 0, k_all: 0, p: self.root_bonus_p, from_root: true }),
                }
                touched += 1;
            }
        }
        touched
    }

    pub fn get(&self, pii: PiiType, key: &str) -> Option<&KeyStat> {
        self.entries.get(&key.to_lowercase())?.iter().find(|s| s.pii == pii)
    }

    /// Suspicious kinds for `key`, highest P first.
    fn candidates(&self, key: &str) -> Vec<&KeyStat> {
        let mut c: Vec<&KeyStat> = match self.entries.get(&key.to_lowercase()) {
            Some(list) => list.iter().filter(|s| s.p > self.threshold).collect(),
            None => return Vec::new(),
        };
        c.sort_by(|a, b| b.p.total_cmp(&a.p).then(a.pii.cmp(&b.pii)));
        c
    }

    /// Every key/value pair of `flow` whose key is suspicious for a kind whose
    /// validator accepts the value. The highest-P accepted kind wins.
    pub fn extract(&self, flow: &Flow) -> Vec<Extraction> {
        let mut out = Vec::new();
        for pair in flow.kv_pairs.iter().filter(|p| !p.key.is_empty() && !p.value.is_empty()) {
            if let Some(stat) = self.candidates(&pair.key).into_iter().find(|s| validate_value(s.pii, &pair.value)) {
                out.push(Extraction { pii: stat.pii, key: pair.key.clone(), value: pair.value.clone(), span: pair.value_span });
            }
        }
        out
    }
}

fn digits_only(v: &str, min: usize, max: usize) -> bool {
    (min..=max).contains(&v.len()) && v.bytes().all(|b| b.is_ascii_digit())
}

fn hex_run(v: &str, len: usize) -> bool {
    v.len() == len && v.bytes().all(|b| b.is_ascii_hexdigit())
}

fn is_coordinate(v: &str) -> bool {
    let parse = |s: &str, lim: f64| s.trim().parse::<f64>().ok().filter(|x| x.is_finite() && x.abs() <= lim);
    let parts: Vec<&str> = v.split(',').collect();
    match parts.as_slice() {
        [lat, lon] => parse(lat, 90.0).is_some() && parse(lon, 180.0).is_some(),
        [single] => single.contains('.') && parse(single, 180.0).is_some(),
        _ => false,
    }
}

fn is_mac(v: &str) -> bool {
    let sep = if v.contains(':') { ':' } else { '-' };
    let octets: Vec<&str> = v.split(sep).collect();
    octets.len() == 6 && octets.iter().all(|o| hex_run(o, 2))
}

fn is_uuid(v: &str) -> bool {
    let groups: Vec<&str> = v.split('-').collect();
    groups.len() == 5 && groups.iter().zip([8, 4, 4, 4, 12]).all(|(g, n)| hex_run(g, n))
}

/// Structural check that `value` could be a `pii` value.
pub fn validate_value(pii: PiiType, value: &str) -> bool {
    let v = value.trim();
    if v.is_empty() {
        return false;
    }
    match pii {
        PiiType::Imei => digits_only(v, 14, 16),
        PiiType::Imsi => digits_only(v, 14, 15),
        PiiType::Iccid => digits_only(v, 18, 22),
        PiiType::EmailAddress => v.contains('@'),
        PiiType::GpsCoordinate => is_coordinate(v),
        PiiType::MacAddress => is_mac(v),
        PiiType::AndroidId => hex_run(v, 16),
        PiiType::AdvertiserId => is_uuid(v),
        PiiType::PhoneNumber => {
            let stripped: String = v.chars().filter(|c| !matches!(c, '+' | '-' | '(' | ')' | ' ' | '.')).collect();
            digits_only(&stripped, 7, 15)
        }
        PiiType::ZipCode => {
            let (head, tail) = v.split_once('-').unwrap_or((v, ""));
            digits_only(head, 5, 5) && (tail.is_empty() || digits_only(tail, 4, 4))
        }
        _ => true,
    }
}

/// Untyped key probabilities with no validators or root boosts: every key
/// whose leak probability exceeds the threshold is reported.
#[derive(Debug, Clone, Default)]
pub struct NaiveKeyTable {
    pub p: BTreeMap<String, f64>,
    pub threshold: f64,
}

impl NaiveKeyTable {
    pub fn build(examples: &[Example], threshold: f64) -> Self {
        let mut all: BTreeMap<String, usize> = BTreeMap::new();
        let mut leaking: BTreeMap<String, usize> = BTreeMap::new();
        for ex in examples {
            let flow = &ex.flow.flow;
            let mut keys = BTreeSet::new();
            let mut hits = BTreeSet::new();
            for p in flow.kv_pairs.iter().filter(|p| !p.key.is_empty()) {
                let k = p.key.to_lowercase();
                if ex.leaks.iter().any(|l| carries(&p.value, &l.value)) {
                    hits.insert(k.clone());
                }
                keys.insert(k);
            }
            for k in keys {
                *all.entry(k).or_default() += 1;
            }
            for k in hits {
                *leaking.entry(k).or_default() += 1;
            }
        }
        let p = all.iter().map(|(k, n)| (k.clone(), leaking.get(k).copied().unwrap_or(0) as f64 / *n as f64)).collect();
        NaiveKeyTable { p, threshold }
    }

    pub fn extract_spans(&self, flow: &Flow) -> Vec<Span> {
        flow.kv_pairs
            .iter()
            .filter(|p| !p.key.is_empty() && !p.value.is_empty())
            .filter(|p| self.p.get(&p.key.to_lowercase()).is_some_and(|&x| x > self.threshold))
            .map(|p| p.value_span)
            .collect()
    }
}

/// Pair-level confusion counts for extraction over ground-truth positive flows.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExtractionCounts {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
}

impl ExtractionCounts {
    /// Scores one flow: each keyed pair is a positive when its value carries a
    /// leaked value, and predicted positive when its value span is in `extracted`.
    pub fn add(&mut self, ex: &Example, extracted: &[Span]) {
        if !ex.is_positive() {
            return;
        }
        for p in ex.flow.flow.kv_pairs.iter().filter(|p| !p.key.is_empty()) {
            let truth = ex.leaks.iter().any(|l| carries(&p.value, &l.value));
            let predicted = extracted.contains(&p.value_span);
            match (truth, predicted) {
                (true, true) => self.tp += 1,
                (false, true) => self.fp += 1,
                (false, false) => self.tn += 1,
                (true, false) => self.fn_ += 1,
            }
        }
    }

    pub fn fp_rate(&self) -> f64 {
        ratio(self.fp, self.fp + self.tn)
    }

    pub fn fn_rate(&self) -> f64 {
        ratio(self.fn_, self.fn_ + self.tp)
    }
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}
