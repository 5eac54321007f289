//! C4.5 decision trees over binary word-presence features.
//!
//! Splits are binary (word present / absent) and chosen by gain ratio.
//! Grown trees are pruned bottom-up by subtree replacement using the
//! pessimistic error estimate with confidence factor `pruning_confidence`.

mod prune;

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{fingerprint, FeatureVector, TrainingSet};

pub use prune::added_errors;

/// Gain ratios within this distance of the best count as ties.
pub const GAIN_RATIO_TIE_EPS: f64 = 1e-12;
/// Information gain at or below this is treated as zero.
pub const MIN_GAIN: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub min_leaf_samples: usize,
    pub pruning_confidence: f64,
    /// Skip pruning and keep the fully grown tree.
    pub unpruned: bool,
    pub rng_seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig { min_leaf_samples: 2, pruning_confidence: 0.25, unpruned: false, rng_seed: 0 }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.min_leaf_samples < 1 {
            return Err(Error::Config("train.min_leaf_samples must be at least 1".into()));
        }
        if !(self.pruning_confidence > 0.0 && self.pruning_confidence < 1.0) {
            return Err(Error::Config("train.pruning_confidence must be in (0, 1)".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TreeNode {
    Internal {
        feature_index: usize,
        feature_word: String,
        present: Box<TreeNode>,
        absent: Box<TreeNode>,
    },
    Leaf {
        predicted_positive: bool,
        /// Laplace-smoothed majority fraction `(n_majority + 1) / (n + 2)`.
        confidence: f64,
        n_train_samples: usize,
        n_positive: usize,
    },
}

impl TreeNode {
    fn leaf(n: usize, pos: usize) -> TreeNode {
        let neg = n - pos;
        let predicted_positive = pos > neg;
        let maj = pos.max(neg);
        TreeNode::Leaf {
            predicted_positive,
            confidence: (maj as f64 + 1.0) / (n as f64 + 2.0),
            n_train_samples: n,
            n_positive: pos,
        }
    }

    pub fn depth(&self) -> usize {
        match self {
            TreeNode::Leaf { .. } => 0,
            TreeNode::Internal { present, absent, .. } => 1 + present.depth().max(absent.depth()),
        }
    }

    pub fn n_leaves(&self) -> usize {
        match self {
            TreeNode::Leaf { .. } => 1,
            TreeNode::Internal { present, absent, .. } => present.n_leaves() + absent.n_leaves(),
        }
    }

    /// Feature indices tested on every root-to-leaf path.
    pub fn paths(&self) -> Vec<Vec<usize>> {
        match self {
            TreeNode::Leaf { .. } => vec![Vec::new()],
            TreeNode::Internal { feature_index, present, absent, .. } => present
                .paths()
                .into_iter()
                .chain(absent.paths())
                .map(|mut p| {
                    p.insert(0, *feature_index);
                    p
                })
                .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainStats {
    pub n_pos: usize,
    pub n_neg: usize,
    pub train_millis: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecisionTree {
    pub root: TreeNode,
    pub vocab_hash: String,
    pub n_features: usize,
    pub stats: TrainStats,
}

/// Binary entropy in bits of a node with `pos` positives out of `n`.
pub fn entropy(pos: usize, n: usize) -> f64 {
    if n == 0 || pos == 0 || pos == n {
        return 0.0;
    }
    let p = pos as f64 / n as f64;
    -(p * p.log2() + (1.0 - p) * (1.0 - p).log2())
}

/// Information gain and split information of a binary split.
pub fn split_scores(n: usize, pos: usize, n_present: usize, pos_present: usize) -> (f64, f64) {
    let n_absent = n - n_present;
    let pos_absent = pos - pos_present;
    let nf = n as f64;
    let w1 = n_present as f64 / nf;
    let w0 = n_absent as f64 / nf;
    let gain = entropy(pos, n) - w1 * entropy(pos_present, n_present) - w0 * entropy(pos_absent, n_absent);
    let split_info = -[w1, w0].iter().filter(|w| **w > 0.0).map(|w| w * w.log2()).sum::<f64>();
    (gain, split_info)
}

struct Grower<'a> {
    set: &'a TrainingSet,
    min_leaf: usize,
}

impl Grower<'_> {
    /// Best admissible split at a node as `(feature, gain_ratio)`.
    fn best_split(&self, idx: &[usize], used: &[bool]) -> Option<(usize, f64)> {
        let n = idx.len();
        let pos = idx.iter().filter(|&&i| self.set.labels[i]).count();
        let nf = self.set.n_features();
        let mut n_present = vec![0usize; nf];
        let mut pos_present = vec![0usize; nf];
        for &i in idx {
            let v = &self.set.vectors[i].bits;
            let label = self.set.labels[i];
            for (f, &b) in v.iter().enumerate() {
                if b {
                    n_present[f] += 1;
                    if label {
                        pos_present[f] += 1;
                    }
                }
            }
        }
        let mut best: Option<(usize, f64)> = None;
        for f in 0..nf {
            if used[f] || n_present[f] < self.min_leaf || n - n_present[f] < self.min_leaf {
                continue;
            }
            let (gain, split_info) = split_scores(n, pos, n_present[f], pos_present[f]);
            if gain <= MIN_GAIN || split_info <= 0.0 {
                continue;
            }
            let ratio = gain / split_info;
            match best {
                Some((_, b)) if ratio <= b + GAIN_RATIO_TIE_EPS => {}
                _ => best = Some((f, ratio)),
            }
        }
        best
    }

    fn grow(&self, idx: Vec<usize>, used: &mut Vec<bool>) -> TreeNode {
        let n = idx.len();
        let pos = idx.iter().filter(|&&i| self.set.labels[i]).count();
        if pos == 0 || pos == n || n < 2 * self.min_leaf {
            return TreeNode::leaf(n, pos);
        }
        let Some((f, _)) = self.best_split(&idx, used) else {
            return TreeNode::leaf(n, pos);
        };
        let (present, absent): (Vec<usize>, Vec<usize>) =
            idx.into_iter().partition(|&i| self.set.vectors[i].bits[f]);
        used[f] = true;
        let p = self.grow(present, used);
        let a = self.grow(absent, used);
        used[f] = false;
        TreeNode::Internal {
            feature_index: f,
            feature_word: self.set.feature_words[f].clone(),
            present: Box::new(p),
            absent: Box::new(a),
        }
    }
}

impl DecisionTree {
    pub fn train(set: &TrainingSet, cfg: &TrainConfig) -> Result<DecisionTree> {
        cfg.validate()?;
        if set.is_empty() {
            return Err(Error::EmptyTrainingSet);
        }
        let nf = set.n_features();
        if let Some(v) = set.vectors.iter().find(|v| v.len() != nf) {
            return Err(Error::VocabularyMismatch { expected: nf, got: v.len() });
        }
        let started = Instant::now();
        let grower = Grower { set, min_leaf: cfg.min_leaf_samples };
        let mut used = vec![false; nf];
        let mut root = grower.grow((0..set.len()).collect(), &mut used);
        if !cfg.unpruned {
            prune::prune(&mut root, cfg.pruning_confidence);
        }
        let n_pos = set.n_positive();
        Ok(DecisionTree {
            root,
            vocab_hash: fingerprint(&set.feature_words),
            n_features: nf,
            stats: TrainStats {
                n_pos,
                n_neg: set.len() - n_pos,
                train_millis: started.elapsed().as_millis() as u64,
            },
        })
    }

    /// A tree that predicts negative for everything.
    pub fn negative_leaf(feature_words: &[String]) -> DecisionTree {
        DecisionTree {
            root: TreeNode::leaf(0, 0),
            vocab_hash: fingerprint(feature_words),
            n_features: feature_words.len(),
            stats: TrainStats { n_pos: 0, n_neg: 0, train_millis: 0 },
        }
    }

    /// Returns `(positive, score)` where score is the positive-class confidence.
    pub fn predict(&self, v: &FeatureVector) -> Result<(bool, f64)> {
        if v.len() != self.n_features {
            return Err(Error::VocabularyMismatch { expected: self.n_features, got: v.len() });
        }
        let mut node = &self.root;
        loop {
            match node {
                TreeNode::Internal { feature_index, present, absent, .. } => {
                    node = if v.bits[*feature_index] { present } else { absent };
                }
                TreeNode::Leaf { predicted_positive, confidence, .. } => {
                    let score = if *predicted_positive { *confidence } else { 1.0 - confidence };
                    return Ok((*predicted_positive, score));
                }
            }
        }
    }

    pub fn root_word(&self) -> Option<&str> {
        match &self.root {
            TreeNode::Internal { feature_word, .. } => Some(feature_word),
            TreeNode::Leaf { .. } => None,
        }
    }

    /// Fraction of `set` classified correctly.
    pub fn accuracy(&self, set: &TrainingSet) -> Result<f64> {
        let mut ok = 0;
        for (v, l) in set.vectors.iter().zip(&set.labels) {
            if self.predict(v)?.0 == *l {
                ok += 1;
            }
        }
        Ok(ok as f64 / set.len().max(1) as f64)
    }
}
