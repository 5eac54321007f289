//! Labeled synthetic traffic.
//!
//! Each domain template produces flows of one shape whose labels follow a
//! fixed rule, so the labels are correct by construction:
//!
//! * `SimpleKey`: positive iff `leak_key` is present.
//! * `ConditionalAbsence`: positive iff `leak_key` is present and
//!   `guard_key` is absent. Decoy negatives carry both, with a hashed value.
//! * `ContextualTerm`: positive iff `leak_key` is present and none of
//!   `context_terms` is. Decoy negatives carry the key (hashed) plus every
//!   context term.
//! * `Benign`: never positive.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::flow::{label_examples, Example, Flow, GroundTruthLabel, Leak, Os, PiiType};
use crate::tokenize::Tokenizer;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LeakPattern {
    SimpleKey,
    ConditionalAbsence,
    ContextualTerm,
    Benign,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum PayloadFormat {
    /// GET with every pair in the query.
    #[default]
    Query,
    /// POST with a form-encoded body.
    Form,
    /// POST with a flat JSON object body.
    Json,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum ValueKind {
    Word,
    Digits(usize),
    Hex(usize),
    Uuid,
    Const(String),
}

/// A non-leaking pair added to a fraction of a domain's flows, regardless of label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtraKey {
    pub key: String,
    pub value: ValueKind,
    pub fraction: f64,
}

impl ExtraKey {
    pub fn new(key: &str, value: ValueKind, fraction: f64) -> Self {
        ExtraKey { key: key.to_string(), value, fraction }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DomainTemplate {
    /// Registrable domain, e.g. `mopub.com`.
    pub domain: String,
    pub subdomain: String,
    /// Fixed OS; drawn from the corpus mix when unset.
    pub os: Option<Os>,
    pub pattern: LeakPattern,
    pub pii: PiiType,
    pub leak_key: String,
    pub guard_key: String,
    pub context_terms: Vec<String>,
    /// Share of negatives that are decoys (see module docs).
    pub decoy_fraction: f64,
    pub format: PayloadFormat,
    pub paths: Vec<String>,
    pub extra_keys: Vec<ExtraKey>,
    /// Overrides the corpus-wide flow count.
    pub flows: Option<usize>,
    /// Overrides the corpus-wide leak fraction.
    pub leak_fraction: Option<f64>,
    /// Every positive leaks this value instead of a fresh one.
    pub fixed_value: Option<String>,
}

impl Default for DomainTemplate {
    fn default() -> Self {
        DomainTemplate {
            domain: String::new(),
            subdomain: "api".into(),
            os: None,
            pattern: LeakPattern::SimpleKey,
            pii: PiiType::AdvertiserId,
            leak_key: "idfa".into(),
            guard_key: "urid".into(),
            context_terms: vec!["session".into(), "deviceId".into()],
            decoy_fraction: 0.3,
            format: PayloadFormat::Query,
            paths: vec!["/v1/event".into(), "/v1/config".into(), "/v1/ad".into()],
            extra_keys: Vec::new(),
            flows: None,
            leak_fraction: None,
            fixed_value: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OsWeight {
    pub os: Os,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorpusSpec {
    pub domains: Vec<DomainTemplate>,
    pub flows_per_domain: usize,
    pub leak_fraction: f64,
    pub os_mix: Vec<OsWeight>,
    pub rng_seed: u64,
    /// Prepended to every flow id, to keep several corpora apart.
    pub id_prefix: String,
}

const SEARCH_SITES: [&str; 24] = [
    "findly", "seekr", "lookup", "querio", "askbox", "scout", "huntr", "probe", "glance", "sift", "trawl", "delve",
    "rummage", "browse", "ferret", "quest", "survey", "inspect", "peek", "discover", "explore", "locate", "fetchy",
    "pinpoint",
];
const METRIC_SITES: [&str; 8] = ["statpulse", "tally", "countly", "beacon", "gauge", "metrix", "tracelog", "signal"];
const SOCIAL_SITES: [&str; 6] = ["chatter", "friendly", "circle", "hangout", "meetup", "grouply"];

impl Default for CorpusSpec {
    /// Four (domain, OS) pairs at 1,276 flows with 266 positives each, one
    /// per leak pattern family, plus a tail of small domains that only the
    /// general classifier sees.
    fn default() -> Self {
        let big = |domain: &str, sub: &str, os: Os| DomainTemplate {
            domain: domain.into(),
            subdomain: sub.into(),
            os: Some(os),
            ..Default::default()
        };
        let mut domains = vec![
            DomainTemplate {
                extra_keys: vec![ExtraKey::new("sdk", ValueKind::Const("7.4.1".into()), 1.0)],
                paths: vec!["/sdk/ad".into(), "/sdk/config".into(), "/sdk/event".into()],
                ..big("applovin.com", "a", Os::Android)
            },
            DomainTemplate {
                pattern: LeakPattern::ConditionalAbsence,
                pii: PiiType::Imei,
                leak_key: "auid".into(),
                guard_key: "urid".into(),
                decoy_fraction: 0.3,
                format: PayloadFormat::Form,
                paths: vec!["/m/ad".into(), "/m/open".into(), "/m/imp".into()],
                ..big("mopub.com", "ads", Os::Android)
            },
            DomainTemplate {
                pattern: LeakPattern::ContextualTerm,
                pii: PiiType::EmailAddress,
                leak_key: "email".into(),
                decoy_fraction: 0.6,
                format: PayloadFormat::Json,
                paths: vec!["/v2/profile".into(), "/v2/sync".into()],
                ..big("profilesync.net", "api", Os::Ios)
            },
            DomainTemplate {
                pii: PiiType::Imei,
                leak_key: "q".into(),
                paths: vec!["/search".into(), "/suggest".into()],
                ..big("adquery.net", "s", Os::Android)
            },
        ];
        let tail = |domain: String| DomainTemplate { domain, flows: Some(60), ..Default::default() };
        for s in SEARCH_SITES {
            domains.push(DomainTemplate {
                pattern: LeakPattern::Benign,
                extra_keys: vec![ExtraKey::new("q", ValueKind::Word, 1.0)],
                paths: vec!["/search".into(), "/suggest".into()],
                ..tail(format!("{s}.com"))
            });
        }
        for s in METRIC_SITES {
            domains.push(DomainTemplate {
                pii: PiiType::AndroidId,
                leak_key: "uid".into(),
                leak_fraction: Some(0.3),
                ..tail(format!("{s}.io"))
            });
        }
        for s in SOCIAL_SITES {
            domains.push(DomainTemplate {
                pii: PiiType::EmailAddress,
                leak_key: "email".into(),
                format: PayloadFormat::Form,
                extra_keys: vec![ExtraKey::new("uid", ValueKind::Digits(8), 0.5)],
                leak_fraction: Some(0.3),
                ..tail(format!("{s}.net"))
            });
        }
        CorpusSpec {
            domains,
            flows_per_domain: 1276,
            leak_fraction: 266.0 / 1276.0,
            os_mix: vec![OsWeight { os: Os::Android, weight: 0.6 }, OsWeight { os: Os::Ios, weight: 0.4 }],
            rng_seed: 2016,
            id_prefix: String::new(),
        }
    }
}

impl CorpusSpec {
    pub fn validate(&self) -> Result<()> {
        let unit = |x: f64| (0.0..=1.0).contains(&x);
        let mut problems = Vec::new();
        if !unit(self.leak_fraction) {
            problems.push("leak_fraction must be in [0, 1]".to_string());
        }
        if self.flows_per_domain == 0 {
            problems.push("flows_per_domain must be at least 1".to_string());
        }
        let total: f64 = self.os_mix.iter().map(|w| w.weight).sum();
        if self.os_mix.iter().any(|w| w.weight.is_nan() || w.weight < 0.0) || total.is_nan() || total <= 0.0 {
            problems.push("os_mix weights must be non-negative with a positive sum".to_string());
        }
        for (i, d) in self.domains.iter().enumerate() {
            if d.domain.trim().is_empty() {
                problems.push(format!("domains[{i}].domain must not be empty"));
            }
            if d.flows == Some(0) {
                problems.push(format!("domains[{i}].flows must be at least 1"));
            }
            if d.leak_fraction.is_some_and(|f| !unit(f)) || !unit(d.decoy_fraction) {
                problems.push(format!("domains[{i}]: fractions must be in [0, 1]"));
            }
            if d.paths.is_empty() {
                problems.push(format!("domains[{i}].paths must not be empty"));
            }
            if d.pattern != LeakPattern::Benign && d.leak_key.is_empty() {
                problems.push(format!("domains[{i}].leak_key must not be empty"));
            }
            if d.extra_keys.iter().any(|k| !unit(k.fraction)) {
                problems.push(format!("domains[{i}].extra_keys: fraction must be in [0, 1]"));
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems.join("; ")))
        }
    }
}

/// Generated flows with one label per flow (negatives have no leaks).
#[derive(Debug, Clone, PartialEq)]
pub struct SynthCorpus {
    pub flows: Vec<Flow>,
    pub labels: Vec<GroundTruthLabel>,
}

impl SynthCorpus {
    /// Analyzes every flow and pairs it with its label.
    pub fn examples(&self, tokenizer: &Tokenizer) -> Vec<Example> {
        let analyzed = self.flows.iter().map(|f| tokenizer.analyze(f.clone())).collect();
        label_examples(analyzed, &self.labels)
    }

    pub fn flow_log(&self) -> String {
        self.flows.iter().map(|f| f.to_json_line() + "\n").collect()
    }

    pub fn label_log(&self) -> String {
        self.labels.iter().map(|l| l.to_json_line() + "\n").collect()
    }

    /// Writes `flows.jsonl` and `labels.jsonl` under `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("flows.jsonl"), self.flow_log())?;
        fs::write(dir.join("labels.jsonl"), self.label_log())?;
        Ok(())
    }
}

const APPS: [(&str, &str); 5] = [
    ("com.weather.pro", "WeatherPro"),
    ("com.puzzle.blocks", "PuzzleBlocks"),
    ("com.news.daily", "DailyNews"),
    ("com.fit.tracker", "FitTracker"),
    ("com.photo.editor", "PhotoEdit"),
];

const WORDS: [&str; 40] = [
    "weather", "pizza", "news", "shoes", "flights", "hotel", "recipes", "music", "movies", "jobs", "cars", "bikes",
    "coffee", "books", "games", "phones", "laptops", "camera", "garden", "tickets", "soccer", "yoga", "sushi", "tacos",
    "museum", "parks", "beach", "hiking", "lamps", "chairs", "paint", "guitar", "piano", "dogs", "cats", "tea",
    "bread", "cheese", "rain", "snow",
];

const FIRST: [&str; 12] = ["alex", "sam", "jo", "maria", "li", "omar", "ana", "ken", "priya", "tom", "eva", "raj"];
const MAIL_HOSTS: [&str; 4] = ["example.com", "mail.example.org", "inbox.example.net", "post.example.com"];

fn hex<R: Rng + ?Sized>(rng: &mut R, n: usize) -> String {
    (0..n).map(|_| char::from_digit(rng.random_range(0..16), 16).expect("digit < 16")).collect()
}

fn digits<R: Rng + ?Sized>(rng: &mut R, n: usize) -> String {
    (0..n).map(|_| char::from_digit(rng.random_range(0..10), 10).expect("digit < 10")).collect()
}

fn uuid<R: Rng + ?Sized>(rng: &mut R) -> String {
    format!("{}-{}-{}-{}-{}", hex(rng, 8), hex(rng, 4), hex(rng, 4), hex(rng, 4), hex(rng, 12)).to_uppercase()
}

/// A fresh, well-formed value of kind `pii`.
pub fn sample_value<R: Rng + ?Sized>(pii: PiiType, rng: &mut R) -> String {
    match pii {
        PiiType::Imei => format!("35{}", digits(rng, 13)),
        PiiType::Imsi => format!("310{}", digits(rng, 12)),
        PiiType::Iccid => format!("8901{}", digits(rng, 15)),
        PiiType::MacAddress => (0..6).map(|_| hex(rng, 2)).collect::<Vec<_>>().join(":"),
        PiiType::AndroidId => hex(rng, 16),
        PiiType::AdvertiserId | PiiType::OsDeviceId => uuid(rng),
        PiiType::Name => FIRST[rng.random_range(0..FIRST.len())].to_string(),
        PiiType::Gender => ["female", "male"][rng.random_range(0..2)].to_string(),
        PiiType::DateOfBirth => {
            format!("19{}-{:02}-{:02}", digits(rng, 2), rng.random_range(1..=12), rng.random_range(1..=28))
        }
        PiiType::EmailAddress => format!(
            "{}.{}@{}",
            FIRST[rng.random_range(0..FIRST.len())],
            digits(rng, 5),
            MAIL_HOSTS[rng.random_range(0..MAIL_HOSTS.len())]
        ),
        PiiType::MailingAddress => format!("{} Main St", rng.random_range(1..999)),
        PiiType::RelationshipStatus => ["single", "married"][rng.random_range(0..2)].to_string(),
        PiiType::PhoneNumber => format!("617555{}", digits(rng, 4)),
        PiiType::AddressBookEntry => format!("{}:617555{}", FIRST[rng.random_range(0..FIRST.len())], digits(rng, 4)),
        PiiType::GpsCoordinate => format!(
            "{:.5},{:.5}",
            rng.random_range(25.0..49.0f64),
            rng.random_range(-124.0..-67.0f64)
        ),
        PiiType::ZipCode => format!("0{}", digits(rng, 4)),
        PiiType::Username => format!("user{}", digits(rng, 4)),
        PiiType::Password => {
            let alnum = b"abcdefghijkmnpqrstuvwxyzABCDEFGHJKLMNPQRSTUVWXYZ23456789";
            (0..10).map(|_| alnum[rng.random_range(0..alnum.len())] as char).collect()
        }
    }
}

fn sample_extra<R: Rng + ?Sized>(kind: &ValueKind, rng: &mut R) -> String {
    match kind {
        ValueKind::Word => WORDS[rng.random_range(0..WORDS.len())].to_string(),
        ValueKind::Digits(n) => digits(rng, *n),
        ValueKind::Hex(n) => hex(rng, *n),
        ValueKind::Uuid => uuid(rng),
        ValueKind::Const(s) => s.clone(),
    }
}

/// Value for a context term: identifiers look like UUIDs, others like tokens.
fn context_value<R: Rng + ?Sized>(term: &str, rng: &mut R) -> String {
    if term.to_ascii_lowercase().ends_with("id") {
        uuid(rng)
    } else {
        hex(rng, 32)
    }
}

/// Percent-encodes a query or form component, leaving `:@,!` readable so
/// that emails, coordinates and MACs appear verbatim.
fn encode_component(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for b in s.bytes() {
        if b.is_ascii_alphanumeric() || matches!(b, b'-' | b'_' | b'.' | b'~' | b':' | b'@' | b',' | b'!') {
            out.push(b as char);
        } else {
            out.push_str(&format!("%{b:02X}"));
        }
    }
    out
}

fn form(pairs: &[(String, String)]) -> String {
    pairs.iter().map(|(k, v)| format!("{}={}", encode_component(k), encode_component(v))).collect::<Vec<_>>().join("&")
}

fn json_object(pairs: &[(String, String)]) -> String {
    let members: Vec<String> = pairs
        .iter()
        .map(|(k, v)| {
            let key = serde_json::to_string(k).expect("strings serialize");
            let val = serde_json::to_string(v).expect("strings serialize");
            format!("{key}:{val}")
        })
        .collect();
    format!("{{{}}}", members.join(","))
}

fn domain_seed(base: u64, index: usize, domain: &str) -> u64 {
    let d = Sha256::digest(format!("{base}:{index}:{domain}").as_bytes());
    u64::from_le_bytes(d[..8].try_into().expect("digest is 32 bytes"))
}

fn pick_os<R: Rng + ?Sized>(mix: &[OsWeight], rng: &mut R) -> Os {
    let total: f64 = mix.iter().map(|w| w.weight).sum();
    let mut x = rng.random_range(0.0..total);
    for w in mix {
        if x < w.weight {
            return w.os;
        }
        x -= w.weight;
    }
    mix.last().map_or(Os::Unknown, |w| w.os)
}

#[derive(Clone, Copy, PartialEq)]
enum Role {
    Positive,
    Negative,
}

fn build_flow<R: Rng + ?Sized>(
    spec: &CorpusSpec,
    tpl: &DomainTemplate,
    i: usize,
    role: Role,
    rng: &mut R,
) -> (Flow, Vec<Leak>) {
    let os = tpl.os.unwrap_or_else(|| pick_os(&spec.os_mix, rng));
    let host = format!("{}.{}", tpl.subdomain, tpl.domain);
    let (app_id, app_name) = APPS[rng.random_range(0..APPS.len())];
    let path = &tpl.paths[rng.random_range(0..tpl.paths.len())];
    let ts_ms = 1_450_000_000_000 + (i as i64) * 1_000 + rng.random_range(0..1_000);

    let mut pairs: Vec<(String, String)> = vec![
        ("v".into(), format!("{}", rng.random_range(1..4))),
        ("ts".into(), ts_ms.to_string()),
        // variable length keeps body sizes from tracking the label
        ("nonce".into(), { let n = rng.random_range(8..=72); hex(rng, n) }),
    ];
    let mut leaks = Vec::new();
    let leak_value =
        |rng: &mut R| tpl.fixed_value.clone().unwrap_or_else(|| sample_value(tpl.pii, rng));
    match (tpl.pattern, role) {
        (LeakPattern::Benign, _) => {}
        (_, Role::Positive) => {
            let v = leak_value(rng);
            pairs.push((tpl.leak_key.clone(), v.clone()));
            leaks.push(Leak { pii: tpl.pii, value: v });
        }
        (LeakPattern::SimpleKey, Role::Negative) => {}
        (LeakPattern::ConditionalAbsence, Role::Negative) => {
            if rng.random_bool(tpl.decoy_fraction) {
                pairs.push((tpl.leak_key.clone(), hex(rng, 40)));
                pairs.push((tpl.guard_key.clone(), hex(rng, 16)));
            } else if rng.random_bool(0.5) {
                pairs.push((tpl.guard_key.clone(), hex(rng, 16)));
            }
        }
        (LeakPattern::ContextualTerm, Role::Negative) => {
            if rng.random_bool(tpl.decoy_fraction) {
                pairs.push((tpl.leak_key.clone(), hex(rng, 64)));
                for t in &tpl.context_terms {
                    pairs.push((t.clone(), context_value(t, rng)));
                }
            }
        }
    }
    for extra in &tpl.extra_keys {
        if rng.random_bool(extra.fraction) {
            pairs.push((extra.key.clone(), sample_extra(&extra.value, rng)));
        }
    }

    let ua_os = match os {
        Os::Android => "Linux; Android 9; Pixel 2",
        Os::Ios => "iPhone; iOS 12.1",
        Os::Windows => "Windows Phone 10.0",
        Os::Unknown => "compatible",
    };
    let mut flow = Flow::new(
        format!("{}{}-{i:05}", spec.id_prefix, tpl.domain),
        os,
        Some(&host),
        if tpl.format == PayloadFormat::Query { "GET" } else { "POST" },
        path,
    );
    flow.ts_ms = ts_ms;
    flow.app_id = Some(app_id.to_string());
    flow = flow
        .with_header("Host", &host)
        .with_header("User-Agent", &format!("{app_name}/3.2.1 ({ua_os})"))
        .with_header("Accept", "*/*")
        .with_header("Accept-Language", "en-US")
        .with_header("Connection", "keep-alive");
    let (query_pairs, body) = match tpl.format {
        PayloadFormat::Query => (pairs, None),
        PayloadFormat::Form => {
            let v = pairs.remove(0);
            (vec![v], Some((form(&pairs), "application/x-www-form-urlencoded")))
        }
        PayloadFormat::Json => {
            let v = pairs.remove(0);
            (vec![v], Some((json_object(&pairs), "application/json")))
        }
    };
    flow = flow.with_query(&form(&query_pairs));
    if let Some((body, ctype)) = body {
        flow = flow
            .with_header("Content-Type", ctype)
            .with_header("Content-Length", &body.len().to_string())
            .with_body(body.into_bytes(), Some(ctype));
    }
    (flow, leaks)
}

/// Generates the corpus described by `spec`. The same spec always yields
/// the same flows and labels.
pub fn generate(spec: &CorpusSpec) -> Result<SynthCorpus> {
    spec.validate()?;
    let mut flows = Vec::new();
    let mut labels = Vec::new();
    for (index, tpl) in spec.domains.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(domain_seed(spec.rng_seed, index, &tpl.domain));
        let n = tpl.flows.unwrap_or(spec.flows_per_domain);
        let fraction = match tpl.pattern {
            LeakPattern::Benign => 0.0,
            _ => tpl.leak_fraction.unwrap_or(spec.leak_fraction),
        };
        let n_pos = ((n as f64) * fraction).round() as usize;
        let mut roles: Vec<Role> = (0..n).map(|i| if i < n_pos { Role::Positive } else { Role::Negative }).collect();
        roles.shuffle(&mut rng);
        for (i, role) in roles.into_iter().enumerate() {
            let (flow, leaks) = build_flow(spec, tpl, i, role, &mut rng);
            labels.push(GroundTruthLabel { flow_id: flow.id.clone(), leaks });
            flows.push(flow);
        }
    }
    Ok(SynthCorpus { flows, labels })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one(pattern: LeakPattern, n: usize, fraction: f64) -> CorpusSpec {
        CorpusSpec {
            domains: vec![DomainTemplate {
                domain: "mopub.com".into(),
                os: Some(Os::Android),
                pattern,
                pii: PiiType::Imei,
                leak_key: "auid".into(),
                decoy_fraction: 0.5,
                ..Default::default()
            }],
            flows_per_domain: n,
            leak_fraction: fraction,
            ..Default::default()
        }
    }

    #[test]
    fn positive_count_follows_fraction() {
        let c = generate(&one(LeakPattern::SimpleKey, 1000, 0.2)).unwrap();
        assert_eq!(c.flows.len(), 1000);
        assert_eq!(c.labels.iter().filter(|l| !l.leaks.is_empty()).count(), 200);
        let b = generate(&one(LeakPattern::Benign, 50, 0.5)).unwrap();
        assert!(b.labels.iter().all(|l| l.leaks.is_empty()));
    }

    #[test]
    fn same_seed_same_bytes() {
        let spec = one(LeakPattern::ConditionalAbsence, 200, 0.3);
        assert_eq!(generate(&spec).unwrap().flow_log(), generate(&spec).unwrap().flow_log());
        let mut other = spec.clone();
        other.rng_seed += 1;
        assert_ne!(generate(&spec).unwrap().flow_log(), generate(&other).unwrap().flow_log());
    }

    #[test]
    fn labels_follow_the_pattern() {
        let tok = Tokenizer::default();
        for pattern in [LeakPattern::SimpleKey, LeakPattern::ConditionalAbsence, LeakPattern::ContextualTerm] {
            let c = generate(&one(pattern, 300, 0.3)).unwrap();
            for ex in c.examples(&tok) {
                let keys: Vec<&str> = ex.flow.flow.kv_pairs.iter().map(|p| p.key.as_str()).collect();
                let has = |k: &str| keys.contains(&k);
                let expected = match pattern {
                    LeakPattern::SimpleKey => has("auid"),
                    LeakPattern::ConditionalAbsence => has("auid") && !has("urid"),
                    _ => has("auid") && !has("session") && !has("deviceId"),
                };
                assert_eq!(ex.is_positive(), expected, "{pattern:?} {}", ex.id());
                for leak in &ex.leaks {
                    let f = &ex.flow.flow;
                    assert!(f.query.contains(&leak.value) || String::from_utf8_lossy(&f.body).contains(&leak.value));
                }
            }
        }
    }

    #[test]
    fn default_spec_shape() {
        let spec = CorpusSpec::default();
        spec.validate().unwrap();
        let json = serde_json::to_string(&spec).unwrap();
        assert_eq!(serde_json::from_str::<CorpusSpec>(&json).unwrap(), spec);
        let big: Vec<&DomainTemplate> = spec.domains.iter().filter(|d| d.flows.is_none()).collect();
        assert!(big.len() >= 3);
        assert_eq!(((spec.flows_per_domain as f64) * spec.leak_fraction).round() as usize, 266);
    }

    #[test]
    fn bad_specs_are_rejected() {
        let mut s = one(LeakPattern::SimpleKey, 10, 1.5);
        assert!(s.validate().is_err());
        s.leak_fraction = 0.5;
        s.flows_per_domain = 0;
        assert!(s.validate().is_err());
        s.flows_per_domain = 1;
        s.os_mix.clear();
        assert!(s.validate().is_err());
    }

    #[test]
    fn sampled_values_pass_validators() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for pii in PiiType::ALL {
            for _ in 0..20 {
                let v = sample_value(pii, &mut rng);
                assert!(crate::extract::validate_value(pii, &v), "{pii}: {v}");
            }
        }
    }
}
