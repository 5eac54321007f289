//! Detection, extraction and control of personally identifiable information
//! (PII) leaking in HTTP flows.
//!
//! The pipeline is:
//!
//! 1. [`flow`] parses flow-log records and splits payloads into key/value pairs.
//! 2. [`decode`] and [`tokenize`] turn a flow into a bag of words.
//! 3. [`features`] builds per-classifier vocabularies and binary feature vectors.
//! 4. [`tree`] is a C4.5 learner over those vectors.
//! 5. [`registry`] owns one classifier per (destination domain, OS) pair plus a
//!    general fallback, evaluates them and retrains them from user feedback.
//! 6. [`extract`] finds which key/value pairs in a positive flow carry the PII.
//! 7. [`rewrite`] applies user block/remove/replace rules.
//! 8. [`engine`] ties everything together for the long-running service.
//!
//! [`synth`] generates labeled corpora for tests and benchmarks.

pub mod decode;
pub mod engine;
pub mod error;
pub mod extract;
pub mod features;
pub mod flow;
pub mod registry;
pub mod rewrite;
pub mod synth;
pub mod tokenize;
pub mod tree;

#[cfg(test)]
mod test_support;

pub use error::{Error, Result};
pub use extract::{Extraction, ExtractorConfig, SuspiciousKeyTable};
pub use features::{FeatureVector, FeatureVocabulary, TrainingSet, VocabularyConfig};
pub use flow::{
    label_examples, parse_flow_record, Example, Flow, FlowRecord, GroundTruthLabel, KeyValuePair, Leak, Os,
    PiiCategory, PiiType, Span,
};
pub use registry::{ClassifierKey, Metrics, ModelSet, PipelineConfig, PredictionRecord, Registry, RegistryConfig};
pub use rewrite::{Decision, RewriteOutcome, RewriteRule, RuleAction, RuleScope};
pub use tokenize::{AnalyzedFlow, TokenizedFlow, Tokenizer, TokenizerConfig};
pub use tree::{DecisionTree, TrainConfig};
