use std::collections::{BTreeMap, BTreeSet};

use leakwatch_core::extract::KeyStat;
use leakwatch_core::features::{randomize_example, randomize_value};
use leakwatch_core::flow::registrable_domain;
use leakwatch_core::registry::{auc, stratified_folds, Confusion};
use leakwatch_core::rewrite::rewrite;
use leakwatch_core::synth::{generate, CorpusSpec};
use leakwatch_core::tree::TreeNode;
use leakwatch_core::*;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const KEYS: [&str; 8] = ["idfa", "email", "zip", "uid", "v", "lang", "sid", "page"];
const HOSTS: [&str; 5] = ["api.applovin.com", "Ads.MoPub.COM", "t.example.co.uk", "10.0.0.7", "localhost"];

fn pairs() -> impl Strategy<Value = Vec<(String, String)>> {
    prop::collection::vec((prop::sample::select(&KEYS[..]), "[A-Za-z0-9.@_-]{1,12}"), 0..6)
        .prop_map(|v| v.into_iter().map(|(k, v)| (k.to_string(), v)).collect())
}

fn form(pairs: &[(String, String)]) -> String {
    pairs.iter().map(|(k, v)| format!("{k}={v}")).collect::<Vec<_>>().join("&")
}

prop_compose! {
    fn raw_flow()(
        host in prop::sample::select(&HOSTS[..]),
        os in prop::sample::select(vec![Os::Android, Os::Ios, Os::Unknown]),
        method in prop::sample::select(vec!["GET", "POST"]),
        query in pairs(),
        body in pairs(),
        body_kind in 0..3u8,
        ua in "[a-z]{2,8}/[0-9]\\.[0-9]",
    ) -> Flow {
        let f = Flow::new("f1", os, Some(host), method, "/v1/x").with_query(&form(&query)).with_header("User-Agent", &ua);
        match body_kind {
            0 => f,
            1 => f.with_body(form(&body), Some("application/x-www-form-urlencoded")),
            _ => {
                let obj: serde_json::Map<String, serde_json::Value> =
                    body.into_iter().map(|(k, v)| (k, serde_json::Value::String(v))).collect();
                f.with_body(serde_json::Value::Object(obj).to_string(), Some("application/json"))
            }
        }
    }
}

fn analyzed(flow: Flow) -> AnalyzedFlow {
    Tokenizer::default().analyze(flow)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn flow_records_round_trip(flow in raw_flow()) {
        let parsed = parse_flow_record(&flow.to_json_line()).unwrap();
        let back = parse_flow_record(&parsed.to_json_line()).unwrap();
        prop_assert_eq!(back, parsed);
    }

    #[test]
    fn value_spans_slice_to_values(flow in raw_flow()) {
        let af = analyzed(flow);
        let text = af.flow.kv_text();
        for p in &af.flow.kv_pairs {
            prop_assert_eq!(p.value_span.slice(&text), p.value.as_str());
            prop_assert!(p.pair_span.start <= p.value_span.start && p.value_span.end() <= p.pair_span.end());
        }
    }

    #[test]
    fn domain_ignores_case(host in "[a-zA-Z]{1,8}(\\.[a-zA-Z]{1,8}){0,3}") {
        let d = registrable_domain(&host);
        prop_assert_eq!(&d, &registrable_domain(&host.to_uppercase()));
        prop_assert_eq!(&d, &d.to_lowercase());
    }

    #[test]
    fn tokens_are_clean_and_positions_complete(flow in raw_flow(), extra in "[ -~]{0,40}") {
        let tok = Tokenizer::default();
        let flow = flow.with_header("X-Note", &extra);
        let a = tok.tokenize(&analyzed(flow.clone()).flow);
        let b = tok.tokenize(&analyzed(flow).flow);
        prop_assert_eq!(&a, &b);
        let hard: BTreeSet<char> = TokenizerConfig::default().hard_delimiters.chars().collect();
        for t in &a.tokens {
            prop_assert!(!t.word.is_empty());
            prop_assert!(!t.word.chars().any(|c| hard.contains(&c) || c.is_whitespace()), "{:?}", t.word);
            prop_assert_eq!(t.span.slice(&a.text).to_lowercase(), t.word.clone());
        }
        for (word, spans) in &a.word_positions {
            let found: Vec<Span> = a.tokens.iter().filter(|t| &t.word == word).map(|t| t.span).collect();
            prop_assert_eq!(spans, &found);
        }
        let words: BTreeSet<String> = a.tokens.iter().map(|t| t.word.clone()).collect();
        prop_assert_eq!(words, a.words);
    }

    #[test]
    fn randomized_values_keep_shape(value in "[ -~]{1,40}", seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let r = randomize_value(&value, &mut rng);
        prop_assert_eq!(r.len(), value.len());
        for (a, b) in value.chars().zip(r.chars()) {
            prop_assert_eq!(a.is_ascii_alphanumeric(), b.is_ascii_alphanumeric());
            if !a.is_ascii_alphanumeric() {
                prop_assert_eq!(a, b);
            }
        }
    }

    #[test]
    fn randomized_examples_keep_keys_and_length(flow in raw_flow(), pick in any::<prop::sample::Index>(), seed in any::<u64>()) {
        let af = analyzed(flow);
        prop_assume!(!af.flow.kv_pairs.is_empty());
        let value = pick.get(&af.flow.kv_pairs).value.clone();
        let ex = Example { flow: af, leaks: vec![Leak { pii: PiiType::Username, value }] };
        let r = randomize_example(&ex, &Tokenizer::default(), &mut ChaCha8Rng::seed_from_u64(seed));
        let keys = |e: &Example| e.flow.flow.kv_pairs.iter().map(|p| p.key.clone()).collect::<Vec<_>>();
        prop_assert_eq!(keys(&r), keys(&ex));
        prop_assert_eq!(r.flow.flow.query.len(), ex.flow.flow.query.len());
        prop_assert_eq!(r.flow.flow.body.len(), ex.flow.flow.body.len());
        prop_assert_eq!(r.leaks[0].value.len(), ex.leaks[0].value.len());
    }

    #[test]
    fn vocabulary_respects_frequency_and_vectors_match(flows in prop::collection::vec(raw_flow(), 1..30), min in 1usize..4) {
        let examples: Vec<Example> = flows
            .into_iter()
            .enumerate()
            .map(|(i, mut f)| {
                f.id = format!("f{i}");
                Example { flow: analyzed(f), leaks: Vec::new() }
            })
            .collect();
        let cfg = VocabularyConfig { min_word_frequency: min, ..VocabularyConfig::default() };
        let vocab = FeatureVocabulary::build(&examples, &BTreeSet::new(), &cfg);
        prop_assert!(vocab.words.windows(2).all(|w| w[0] < w[1]));
        for w in &vocab.words {
            let df = examples.iter().filter(|e| e.flow.tokens.words.contains(w)).count();
            prop_assert!(df >= min, "{} has frequency {}", w, df);
            prop_assert!(!vocab.stopwords.contains(w));
        }
        for e in &examples {
            let v = vocab.vectorize(&e.flow.tokens);
            prop_assert_eq!(&v, &vocab.vectorize(&e.flow.tokens));
            prop_assert_eq!(v.len(), vocab.len());
            for (i, w) in vocab.words.iter().enumerate() {
                prop_assert_eq!(v.get(i), e.flow.tokens.words.contains(w));
            }
        }
    }

    #[test]
    fn trees_test_each_feature_once_and_beat_majority(
        rows in prop::collection::vec((prop::collection::vec(any::<bool>(), 6), any::<bool>()), 1..60),
        min_leaf in 1usize..4,
    ) {
        let mut set = TrainingSet::new((0..6).map(|i| format!("w{i}")).collect());
        for (i, (bits, label)) in rows.iter().enumerate() {
            set.push(FeatureVector { bits: bits.clone() }, *label, format!("r{i}"));
        }
        let cfg = TrainConfig { min_leaf_samples: min_leaf, ..TrainConfig::default() };
        let tree = DecisionTree::train(&set, &cfg).unwrap();
        for path in tree.root.paths() {
            let distinct: BTreeSet<usize> = path.iter().copied().collect();
            prop_assert_eq!(distinct.len(), path.len());
        }
        let pos = set.n_positive();
        let majority = pos.max(set.len() - pos) as f64 / set.len() as f64;
        prop_assert!(tree.accuracy(&set).unwrap() >= majority - 1e-12);
        let again = DecisionTree::train(&set, &cfg).unwrap();
        prop_assert_eq!(&again.root, &tree.root);
        if let TreeNode::Leaf { confidence, .. } = &tree.root {
            prop_assert!(*confidence > 0.0 && *confidence < 1.0);
        }
    }

    #[test]
    fn folds_partition_indices(labels in prop::collection::vec(any::<bool>(), 0..200), k in 2usize..12, seed in any::<u64>()) {
        let folds = stratified_folds(&labels, k, seed);
        let mut all = folds.concat();
        all.sort_unstable();
        prop_assert_eq!(all, (0..labels.len()).collect::<Vec<_>>());
        prop_assert!(folds.iter().all(|f| !f.is_empty()));
    }

    #[test]
    fn rates_match_counts(tp in 0usize..500, tn in 0usize..500, fp in 0usize..500, fn_ in 0usize..500) {
        let c = Confusion { tp, tn, fp, fn_ };
        let div = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        prop_assert_eq!(c.ccr(), div(tn + tp, tn + tp + fn_ + fp));
        prop_assert_eq!(c.fpr(), div(fp, fp + tn));
        prop_assert_eq!(c.fnr(), div(fn_, fn_ + tp));
    }

    #[test]
    fn auc_is_bounded_and_one_when_separable(scored in prop::collection::vec((0.0f64..1.0, any::<bool>()), 0..100)) {
        let a = auc(&scored);
        prop_assert!((0.0..=1.0).contains(&a));
        let separable: Vec<(f64, bool)> = scored.iter().map(|&(s, y)| (if y { 1.0 + s } else { s }, y)).collect();
        if scored.iter().any(|s| s.1) && scored.iter().any(|s| !s.1) {
            prop_assert_eq!(auc(&separable), 1.0);
        }
    }

    #[test]
    fn leak_probability_is_monotone(flows in prop::collection::vec((pairs(), any::<prop::sample::Index>()), 1..20), key in prop::sample::select(&KEYS[..4])) {
        let examples: Vec<Example> = flows
            .iter()
            .enumerate()
            .map(|(i, (p, pick))| example(i, p, pick.index(usize::MAX), key))
            .collect();
        let cfg = ExtractorConfig::default();
        let p_of = |ex: &[Example]| {
            SuspiciousKeyTable::build(ex, &cfg).get(PiiType::Username, key).map_or(0.0, |s: &KeyStat| s.p)
        };
        let base = p_of(&examples);
        let pair = vec![(key.to_string(), "value1".to_string())];
        let mut leaking = examples.clone();
        leaking.push(example(99, &pair, 0, key));
        prop_assert!(p_of(&leaking) >= base);
        let mut clean = examples.clone();
        clean.push(Example { flow: analyzed(Flow::new("f-clean", Os::Android, Some("a.b.com"), "GET", "/").with_query(&form(&pair))), leaks: Vec::new() });
        prop_assert!(p_of(&clean) <= base);
        for stat in SuspiciousKeyTable::build(&examples, &cfg).entries.values().flatten() {
            prop_assert!(stat.k_pii <= stat.k_all && (0.0..=1.0).contains(&stat.p));
        }
    }

    #[test]
    fn extraction_spans_slice_and_threshold_filters(flows in prop::collection::vec((pairs(), any::<prop::sample::Index>()), 1..20)) {
        let examples: Vec<Example> = flows.iter().enumerate().map(|(i, (p, pick))| example(i, p, pick.index(usize::MAX), "uid")).collect();
        let mut table = SuspiciousKeyTable::build(&examples, &ExtractorConfig::default());
        let mut last = usize::MAX;
        for t in [0.0, 0.2, 0.4, 0.6, 0.8, 1.0] {
            table.threshold = t;
            let mut n = 0;
            for e in &examples {
                let text = e.flow.flow.kv_text();
                for x in table.extract(&e.flow.flow) {
                    prop_assert_eq!(x.span.slice(&text), x.value.as_str());
                    n += 1;
                }
            }
            prop_assert!(n <= last);
            last = n;
        }
    }

    #[test]
    fn pass_leaves_flow_untouched_and_rewrites_settle(flow in raw_flow(), action in 0..3u8) {
        let af = analyzed(flow);
        let entries: BTreeMap<String, Vec<KeyStat>> = ["idfa", "email", "uid"]
            .iter()
            .map(|k| (k.to_string(), vec![KeyStat { pii: PiiType::Username, k_pii: 1, k_all: 1, p: 1.0, from_root: false }]))
            .collect();
        let table = SuspiciousKeyTable { entries, threshold: 0.2, root_bonus_p: 1.0 };
        let rule = RewriteRule {
            rule_id: "r1".into(),
            scope: RuleScope::ByCategory(PiiCategory::Credential),
            pii_filter: None,
            action: [RuleAction::Block, RuleAction::Remove, RuleAction::Replace("XX".into())][action as usize].clone(),
            enabled: true,
            created_by: String::new(),
        };
        let record = |f: &Flow| PredictionRecord { extracted: table.extract(f), ..prediction(f) };
        let first = rewrite(&af.flow, &record(&af.flow), std::slice::from_ref(&rule));
        match first.decision {
            Decision::Pass => prop_assert_eq!(first.output(&af.flow), Some(&af.flow)),
            Decision::Blocked => prop_assert!(first.output(&af.flow).is_none()),
            Decision::Modified => {
                let out = first.output(&af.flow).unwrap().clone();
                let second = rewrite(&out, &record(&out), std::slice::from_ref(&rule));
                prop_assert_eq!(second.output(&out), Some(&out));
                if let Some(cl) = out.header("content-length") {
                    prop_assert_eq!(cl, out.body.len().to_string());
                }
            }
        }
    }
}

/// A flow over `pairs` whose value at `pick` (modulo the pair count) is labeled as a leak when it
/// sits under `key`.
fn example(i: usize, pairs: &[(String, String)], pick: usize, key: &str) -> Example {
    let af = analyzed(Flow::new(format!("f{i}"), Os::Android, Some("a.b.com"), "GET", "/").with_query(&form(pairs)));
    let leaks = if pairs.is_empty() {
        Vec::new()
    } else {
        let (k, v) = &pairs[pick % pairs.len()];
        if k == key { vec![Leak { pii: PiiType::Username, value: v.clone() }] } else { Vec::new() }
    };
    Example { flow: af, leaks }
}

fn prediction(flow: &Flow) -> PredictionRecord {
    PredictionRecord {
        prediction_id: "p1".into(),
        flow_id: flow.id.clone(),
        ts_ms: 0,
        domain: flow.domain.clone(),
        os: flow.os,
        app_id: flow.app_id.clone(),
        classifier_key: ClassifierKey::General,
        positive: true,
        score: 1.0,
        extracted: Vec::new(),
        model_version: 1,
        generation: 1,
        unmodeled: false,
        unextracted: false,
        micros: 0.0,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn synthetic_leaks_appear_in_their_flows(seed in any::<u64>()) {
        let spec = CorpusSpec { flows_per_domain: 120, rng_seed: seed, ..CorpusSpec::default() };
        let corpus = generate(&spec).unwrap();
        let tok = Tokenizer::default();
        for (flow, label) in corpus.flows.iter().zip(&corpus.labels) {
            prop_assert_eq!(&flow.id, &label.flow_id);
            let text = tok.analyze(flow.clone()).flow.kv_text();
            for leak in &label.leaks {
                prop_assert!(text.contains(&leak.value), "{} missing from {}", leak.value, flow.id);
            }
        }
    }
}
