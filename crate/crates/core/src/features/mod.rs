//! Feature vocabularies, binary feature vectors and training-set preparation.

mod oversample;
mod randomize;

use std::collections::{BTreeMap, BTreeSet};

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::flow::Example;
use crate::tokenize::{TokenizedFlow, Tokenizer};

pub use oversample::{adjacent_words, document_frequencies, oversample_rare_leaks};
pub use randomize::{randomize_example, randomize_pii_values, randomize_value};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VocabularyConfig {
    pub min_word_frequency: usize,
    pub stopword_tfidf_percentile: f64,
    pub max_features: Option<usize>,
}

impl Default for VocabularyConfig {
    fn default() -> Self {
        VocabularyConfig { min_word_frequency: 21, stopword_tfidf_percentile: 0.10, max_features: Some(250) }
    }
}

impl VocabularyConfig {
    pub fn validate(&self) -> Result<()> {
        if self.min_word_frequency < 1 {
            return Err(Error::Config("vocabulary.min_word_frequency must be at least 1".into()));
        }
        let p = self.stopword_tfidf_percentile;
        if !(p > 0.0 && p <= 1.0) {
            return Err(Error::Config("vocabulary.stopword_tfidf_percentile must be in (0, 1]".into()));
        }
        if self.max_features == Some(0) {
            return Err(Error::Config("vocabulary.max_features must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureVocabulary {
    /// Sorted; a word's index is its feature position.
    pub words: Vec<String>,
    /// Document frequency of each retained word.
    pub frequencies: BTreeMap<String, usize>,
    pub stopwords: BTreeSet<String>,
    pub config: VocabularyConfig,
}

impl FeatureVocabulary {
    pub fn empty(config: VocabularyConfig) -> Self {
        FeatureVocabulary { words: Vec::new(), frequencies: BTreeMap::new(), stopwords: BTreeSet::new(), config }
    }

    /// Counts words over `examples` and selects features.
    ///
    /// Words in fewer than `min_word_frequency` flows are dropped. Among the
    /// rest, the lowest-scoring `stopword_tfidf_percentile` by
    /// `tf * ln(N / df)` (tf = total occurrences, df = flows containing the
    /// word) become stopwords unless they are in `protected`. At most
    /// `max_features` of the highest-scoring remaining words are kept.
    pub fn build(examples: &[Example], protected: &BTreeSet<String>, config: &VocabularyConfig) -> Self {
        let n = examples.len();
        if n == 0 {
            return FeatureVocabulary::empty(config.clone());
        }
        let mut df: BTreeMap<&str, usize> = BTreeMap::new();
        let mut tf: BTreeMap<&str, usize> = BTreeMap::new();
        for ex in examples {
            for (w, pos) in &ex.flow.tokens.word_positions {
                *df.entry(w).or_default() += 1;
                *tf.entry(w).or_default() += pos.len();
            }
        }
        let mut scored: Vec<(&str, f64)> = df
            .iter()
            .filter(|(_, &d)| d >= config.min_word_frequency)
            .map(|(&w, &d)| (w, tfidf(tf[w], d, n)))
            .collect();
        scored.sort_by(|a, b| a.1.total_cmp(&b.1).then_with(|| a.0.cmp(b.0)));

        let mut stopwords = BTreeSet::new();
        if !scored.is_empty() {
            let cut = ((config.stopword_tfidf_percentile * scored.len() as f64).ceil() as usize).clamp(1, scored.len());
            let cutoff = scored[cut - 1].1;
            for (w, s) in &scored {
                if *s <= cutoff && !protected.contains(*w) {
                    stopwords.insert(w.to_string());
                }
            }
        }
        let mut kept: Vec<(&str, f64)> = scored.into_iter().filter(|(w, _)| !stopwords.contains(*w)).collect();
        if let Some(max) = config.max_features {
            if kept.len() > max {
                kept.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(b.0)));
                kept.truncate(max);
            }
        }
        let mut words: Vec<String> = kept.iter().map(|(w, _)| w.to_string()).collect();
        words.sort();
        let frequencies = words.iter().map(|w| (w.clone(), df[w.as_str()])).collect();
        FeatureVocabulary { words, frequencies, stopwords, config: config.clone() }
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn index_of(&self, word: &str) -> Option<usize> {
        self.words.binary_search_by(|w| w.as_str().cmp(word)).ok()
    }

    /// First 16 hex digits of SHA-256 over the newline-joined words.
    pub fn fingerprint(&self) -> String {
        fingerprint(&self.words)
    }

    /// Binary presence vector; out-of-vocabulary words are ignored.
    pub fn vectorize(&self, tokens: &TokenizedFlow) -> FeatureVector {
        let mut bits = vec![false; self.words.len()];
        for w in &tokens.words {
            if let Some(i) = self.index_of(w) {
                bits[i] = true;
            }
        }
        FeatureVector { bits }
    }
}

/// First 16 hex digits of SHA-256 over the newline-joined words.
pub fn fingerprint(words: &[String]) -> String {
    let digest = Sha256::digest(words.join("\n").as_bytes());
    digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
}

fn tfidf(tf: usize, df: usize, n: usize) -> f64 {
    tf as f64 * (n as f64 / df as f64).ln()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureVector {
    pub bits: Vec<bool>,
}

impl FeatureVector {
    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn get(&self, i: usize) -> bool {
        self.bits[i]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingSet {
    pub feature_words: Vec<String>,
    pub vectors: Vec<FeatureVector>,
    pub labels: Vec<bool>,
    pub provenance: Vec<String>,
}

impl TrainingSet {
    pub fn new(feature_words: Vec<String>) -> Self {
        TrainingSet { feature_words, vectors: Vec::new(), labels: Vec::new(), provenance: Vec::new() }
    }

    pub fn push(&mut self, vector: FeatureVector, label: bool, flow_id: impl Into<String>) {
        self.vectors.push(vector);
        self.labels.push(label);
        self.provenance.push(flow_id.into());
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn n_features(&self) -> usize {
        self.feature_words.len()
    }

    pub fn n_positive(&self) -> usize {
        self.labels.iter().filter(|l| **l).count()
    }
}

/// Output of [`prepare_training`].
#[derive(Debug, Clone)]
pub struct Prepared {
    pub vocabulary: FeatureVocabulary,
    pub set: TrainingSet,
    /// Randomized and oversampled examples the vocabulary was built from.
    pub examples: Vec<Example>,
}

/// Randomizes leaked values, oversamples rare leaks, builds the vocabulary
/// and vectorizes.
pub fn prepare_training<R: Rng + ?Sized>(
    examples: &[Example],
    config: &VocabularyConfig,
    tokenizer: &Tokenizer,
    rng: &mut R,
) -> Prepared {
    let randomized = randomize_pii_values(examples, tokenizer, rng);
    let sampled = oversample_rare_leaks(&randomized, config.min_word_frequency, tokenizer, rng);
    let protected: BTreeSet<String> = sampled.iter().filter(|e| e.is_positive()).flat_map(adjacent_words).collect();
    let vocabulary = FeatureVocabulary::build(&sampled, &protected, config);
    let mut set = TrainingSet::new(vocabulary.words.clone());
    for ex in &sampled {
        set.push(vocabulary.vectorize(&ex.flow.tokens), ex.is_positive(), ex.id());
    }
    Prepared { vocabulary, set, examples: sampled }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow::PiiType;
    use crate::test_support::example_with_id;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn vocab(words: &[&str]) -> FeatureVocabulary {
        FeatureVocabulary {
            words: words.iter().map(|w| w.to_string()).collect(),
            frequencies: BTreeMap::new(),
            stopwords: BTreeSet::new(),
            config: VocabularyConfig::default(),
        }
    }

    #[test]
    fn vectorize_marks_presence() {
        let tok = Tokenizer::default();
        let v = vocab(&["auid", "urid"]);
        let a = example_with_id(&tok, "a", "auid=1", "", &[]);
        let b = example_with_id(&tok, "b", "zzz=1", "", &[]);
        let c = example_with_id(&tok, "c", "auid=1&urid=2", "", &[]);
        assert_eq!(v.vectorize(&a.flow.tokens).bits, vec![true, false]);
        assert_eq!(v.vectorize(&b.flow.tokens).bits, vec![false, false]);
        assert_eq!(v.vectorize(&c.flow.tokens).bits, vec![true, true]);
    }

    fn corpus(tok: &Tokenizer) -> Vec<Example> {
        let mut out = Vec::new();
        for i in 0..60 {
            let rare = format!("sess{i}");
            if i % 2 == 0 {
                let imei = format!("3569380356{i:05}");
                let q = format!("{rare}=1&auid={imei}&v=2");
                out.push(example_with_id(tok, &format!("p{i}"), &q, "", &[(PiiType::Imei, &imei)]));
            } else {
                let q = format!("ping=1&{rare}=1&v=2");
                out.push(example_with_id(tok, &format!("n{i}"), &q, "", &[]));
            }
        }
        out
    }

    #[test]
    fn rare_and_ubiquitous_words_are_dropped() {
        let tok = Tokenizer::default();
        let ex = corpus(&tok);
        let protected: BTreeSet<String> = ex.iter().flat_map(adjacent_words).collect();
        let v = FeatureVocabulary::build(&ex, &protected, &VocabularyConfig::default());
        assert!(v.index_of("sess3").is_none());
        assert!(v.index_of("auid").is_some());
        assert!(v.index_of("ping").is_some());
        // the header line is in every flow: idf 0
        assert!(v.stopwords.contains("host"));
        assert!(!v.words.contains(&"host".to_string()));
        assert!(v.words.windows(2).all(|w| w[0] < w[1]));
        for w in &v.words {
            assert!(v.frequencies[w] >= 21);
        }
    }

    #[test]
    fn adjacent_words_are_never_stopwords() {
        let tok = Tokenizer::default();
        let ex = corpus(&tok);
        // "v" and "track" are in every flow; "v" follows the leaked value
        let protected: BTreeSet<String> = ex.iter().flat_map(adjacent_words).collect();
        assert!(protected.contains("v"));
        let v = FeatureVocabulary::build(&ex, &protected, &VocabularyConfig::default());
        assert!(!v.stopwords.contains("v"));
        assert!(v.stopwords.contains("track"));
    }

    #[test]
    fn empty_corpus_gives_empty_vocabulary() {
        let v = FeatureVocabulary::build(&[], &BTreeSet::new(), &VocabularyConfig::default());
        assert!(v.is_empty());
    }

    #[test]
    fn max_features_caps_by_score() {
        let tok = Tokenizer::default();
        let ex = corpus(&tok);
        let cfg = VocabularyConfig { max_features: Some(1), ..VocabularyConfig::default() };
        let v = FeatureVocabulary::build(&ex, &BTreeSet::new(), &cfg);
        assert_eq!(v.len(), 1);
    }

    #[test]
    fn prepared_sets_are_parallel_and_value_free() {
        let tok = Tokenizer::default();
        let ex = corpus(&tok);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = prepare_training(&ex, &VocabularyConfig::default(), &tok, &mut rng);
        assert_eq!(p.set.vectors.len(), p.set.labels.len());
        assert_eq!(p.set.provenance.len(), p.set.labels.len());
        assert!(p.set.vectors.iter().all(|v| v.len() == p.vocabulary.len()));
        for e in &ex {
            for l in &e.leaks {
                assert!(p.vocabulary.index_of(&l.value).is_none());
            }
        }
        assert_eq!(p.vocabulary.fingerprint().len(), 16);
    }
}
