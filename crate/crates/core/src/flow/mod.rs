//! Flow records, ground-truth labels and the flow-log wire format.

mod kv;
mod pii;

use std::fmt;
use std::net::IpAddr;
use std::str::FromStr;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine as _;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{Error, Result};
use crate::tokenize::AnalyzedFlow;

pub use kv::{extract_kv_pairs, KvSource};
pub use pii::{PiiCategory, PiiType};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Os {
    Android,
    Ios,
    Windows,
    Unknown,
}

impl Os {
    pub fn as_str(self) -> &'static str {
        match self {
            Os::Android => "android",
            Os::Ios => "ios",
            Os::Windows => "windows",
            Os::Unknown => "unknown",
        }
    }
}

impl fmt::Display for Os {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Os {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "android" => Ok(Os::Android),
            "ios" => Ok(Os::Ios),
            "windows" => Ok(Os::Windows),
            "unknown" => Ok(Os::Unknown),
            other => Err(format!("unknown os `{other}`")),
        }
    }
}

/// Byte range `[start, start + len)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Span {
    pub start: usize,
    pub len: usize,
}

impl Span {
    pub fn new(start: usize, len: usize) -> Self {
        Span { start, len }
    }

    pub fn from_bounds(start: usize, end: usize) -> Self {
        Span { start, len: end - start }
    }

    pub fn end(&self) -> usize {
        self.start + self.len
    }

    pub fn overlaps(&self, other: &Span) -> bool {
        self.start < other.end() && other.start < self.end()
    }

    pub fn slice<'a>(&self, text: &'a str) -> &'a str {
        &text[self.start..self.end()]
    }
}

/// One key/value pair found in a flow's query or body.
///
/// Spans index into [`Flow::kv_text`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KeyValuePair {
    pub key: String,
    pub value: String,
    pub source: KvSource,
    pub value_span: Span,
    /// Covers key, separator and value for pairs that have a key.
    pub pair_span: Span,
}

/// One parsed HTTP request.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Flow {
    pub id: String,
    pub ts_ms: i64,
    pub os: Os,
    /// Host exactly as it appeared in the record.
    pub host: Option<String>,
    /// Registrable destination domain, lowercase; empty when the host is unknown.
    pub domain: String,
    pub app_id: Option<String>,
    pub method: String,
    pub path: String,
    pub query: String,
    pub headers: Vec<(String, String)>,
    #[serde(with = "b64_bytes")]
    pub body: Vec<u8>,
    pub content_type: Option<String>,
    pub content_encoding: Option<String>,
    /// Percent-decoded query. Filled by [`crate::decode::decode_body`].
    #[serde(default)]
    pub decoded_query: String,
    /// Decoded body text. Filled by [`crate::decode::decode_body`].
    #[serde(default)]
    pub decoded_text: String,
    #[serde(default)]
    pub decode_degraded: bool,
    #[serde(default)]
    pub kv_pairs: Vec<KeyValuePair>,
}

impl Flow {
    /// A request with no query, headers or body.
    pub fn new(id: impl Into<String>, os: Os, host: Option<&str>, method: &str, path: &str) -> Flow {
        Flow {
            id: id.into(),
            ts_ms: 0,
            os,
            host: host.map(String::from),
            domain: host.map(registrable_domain).unwrap_or_default(),
            app_id: None,
            method: method.to_string(),
            path: path.to_string(),
            query: String::new(),
            headers: Vec::new(),
            body: Vec::new(),
            content_type: None,
            content_encoding: None,
            decoded_query: String::new(),
            decoded_text: String::new(),
            decode_degraded: false,
            kv_pairs: Vec::new(),
        }
    }

    pub fn with_query(mut self, query: &str) -> Flow {
        self.query = query.to_string();
        self
    }

    pub fn with_header(mut self, name: &str, value: &str) -> Flow {
        self.headers.push((name.to_string(), value.to_string()));
        self
    }

    pub fn with_body(mut self, body: impl Into<Vec<u8>>, content_type: Option<&str>) -> Flow {
        self.body = body.into();
        self.content_type = content_type.map(String::from);
        self
    }

    /// Text that key/value spans point into: decoded query, a newline, decoded body.
    pub fn kv_text(&self) -> String {
        let mut s = String::with_capacity(self.decoded_query.len() + 1 + self.decoded_text.len());
        s.push_str(&self.decoded_query);
        s.push('\n');
        s.push_str(&self.decoded_text);
        s
    }

    /// Offset of the decoded body inside [`Flow::kv_text`].
    pub fn body_offset(&self) -> usize {
        self.decoded_query.len() + 1
    }

    pub fn header(&self, name: &str) -> Option<&str> {
        self.headers
            .iter()
            .find(|(k, _)| k.eq_ignore_ascii_case(name))
            .map(|(_, v)| v.as_str())
    }

    pub fn from_record(rec: FlowRecord) -> Result<Flow> {
        let body = B64.decode(rec.body_b64.as_bytes()).map_err(|e| Error::FlowField {
            field: "body_b64",
            reason: e.to_string(),
        })?;
        let domain = rec.host.as_deref().map(registrable_domain).unwrap_or_default();
        let app_id = rec
            .app
            .filter(|a| !a.is_empty())
            .or_else(|| user_agent_product(&rec.headers));
        Ok(Flow {
            id: rec.id,
            ts_ms: rec.ts_ms,
            os: rec.os,
            host: rec.host,
            domain,
            app_id,
            method: rec.method,
            path: rec.path,
            query: rec.query,
            headers: rec.headers,
            body,
            content_type: rec.content_type,
            content_encoding: rec.content_encoding,
            decoded_query: String::new(),
            decoded_text: String::new(),
            decode_degraded: false,
            kv_pairs: Vec::new(),
        })
    }

    pub fn to_record(&self) -> FlowRecord {
        FlowRecord {
            id: self.id.clone(),
            ts_ms: self.ts_ms,
            os: self.os,
            app: self.app_id.clone(),
            method: self.method.clone(),
            host: self.host.clone(),
            path: self.path.clone(),
            query: self.query.clone(),
            headers: self.headers.clone(),
            body_b64: B64.encode(&self.body),
            content_type: self.content_type.clone(),
            content_encoding: self.content_encoding.clone(),
        }
    }

    /// Serializes to one flow-log line (no trailing newline).
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(&self.to_record()).expect("flow records always serialize")
    }
}

/// Flow-log wire record, one per JSON line.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlowRecord {
    pub id: String,
    pub ts_ms: i64,
    pub os: Os,
    pub app: Option<String>,
    pub method: String,
    pub host: Option<String>,
    pub path: String,
    pub query: String,
    pub headers: Vec<(String, String)>,
    pub body_b64: String,
    pub content_type: Option<String>,
    pub content_encoding: Option<String>,
}

/// Parses one flow-log line into a [`Flow`] with raw fields populated.
///
/// Decoded text and key/value pairs are left empty; see [`crate::tokenize::analyze`].
pub fn parse_flow_record(line: &str) -> Result<Flow> {
    let value: Value = serde_json::from_str(line.trim()).map_err(|e| Error::FlowField {
        field: "record",
        reason: e.to_string(),
    })?;
    let obj = value.as_object().ok_or(Error::FlowField {
        field: "record",
        reason: "expected a JSON object".into(),
    })?;
    let os_str = req_str(obj, "os")?;
    let os = os_str
        .parse::<Os>()
        .map_err(|reason| Error::FlowField { field: "os", reason })?;
    let ts_ms = match obj.get("ts_ms") {
        Some(Value::Number(n)) => n.as_i64().ok_or(Error::FlowField {
            field: "ts_ms",
            reason: "expected an integer".into(),
        })?,
        Some(_) => {
            return Err(Error::FlowField { field: "ts_ms", reason: "expected an integer".into() })
        }
        None => return Err(Error::FlowField { field: "ts_ms", reason: "missing".into() }),
    };
    let headers = match obj.get("headers") {
        None | Some(Value::Null) => Vec::new(),
        Some(Value::Array(items)) => items
            .iter()
            .map(|h| match h.as_array().map(|a| a.as_slice()) {
                Some([Value::String(k), Value::String(v)]) => Ok((k.clone(), v.clone())),
                _ => Err(Error::FlowField {
                    field: "headers",
                    reason: "each header must be a [name, value] pair of strings".into(),
                }),
            })
            .collect::<Result<Vec<_>>>()?,
        Some(_) => {
            return Err(Error::FlowField { field: "headers", reason: "expected an array".into() })
        }
    };
    let rec = FlowRecord {
        id: req_str(obj, "id")?.to_string(),
        ts_ms,
        os,
        app: opt_str(obj, "app")?,
        method: req_str(obj, "method")?.to_string(),
        host: opt_str(obj, "host")?,
        path: req_str(obj, "path")?.to_string(),
        query: opt_str(obj, "query")?.unwrap_or_default(),
        headers,
        body_b64: opt_str(obj, "body_b64")?.unwrap_or_default(),
        content_type: opt_str(obj, "content_type")?,
        content_encoding: opt_str(obj, "content_encoding")?,
    };
    if rec.id.is_empty() {
        return Err(Error::FlowField { field: "id", reason: "must not be empty".into() });
    }
    Flow::from_record(rec)
}

fn req_str<'a>(obj: &'a Map<String, Value>, field: &'static str) -> Result<&'a str> {
    match obj.get(field) {
        Some(Value::String(s)) => Ok(s),
        Some(_) => Err(Error::FlowField { field, reason: "expected a string".into() }),
        None => Err(Error::FlowField { field, reason: "missing".into() }),
    }
}

fn opt_str(obj: &Map<String, Value>, field: &'static str) -> Result<Option<String>> {
    match obj.get(field) {
        None | Some(Value::Null) => Ok(None),
        Some(Value::String(s)) => Ok(Some(s.clone())),
        Some(_) => Err(Error::FlowField { field, reason: "expected a string or null".into() }),
    }
}

// Public suffixes with a second level commonly seen in mobile traffic.
const SECOND_LEVEL_SUFFIXES: &[&str] = &[
    "co.uk", "org.uk", "ac.uk", "gov.uk", "com.au", "net.au", "org.au", "co.jp", "ne.jp",
    "or.jp", "com.br", "com.cn", "net.cn", "com.tw", "co.kr", "co.in", "co.nz", "com.mx",
    "com.sg", "com.hk", "co.za", "com.tr", "com.ar",
];

/// Reduces a Host header value to its registrable domain, lowercase.
pub fn registrable_domain(host: &str) -> String {
    let mut h = host.trim().to_ascii_lowercase();
    if let Some(rest) = h.strip_prefix('[') {
        // [v6]:port
        return rest.split(']').next().unwrap_or_default().to_string();
    }
    if h.matches(':').count() == 1 {
        h.truncate(h.find(':').unwrap());
    }
    let h = h.trim_end_matches('.');
    if h.parse::<IpAddr>().is_ok() {
        return h.to_string();
    }
    let labels: Vec<&str> = h.split('.').filter(|l| !l.is_empty()).collect();
    let keep = match labels.len() {
        0..=2 => labels.len(),
        n => {
            let last_two = format!("{}.{}", labels[n - 2], labels[n - 1]);
            if SECOND_LEVEL_SUFFIXES.contains(&last_two.as_str()) {
                3
            } else {
                2
            }
        }
    };
    labels[labels.len() - keep..].join(".")
}

/// Product token of the User-Agent header, e.g. `Weather` for `Weather/2.1 (Linux)`.
fn user_agent_product(headers: &[(String, String)]) -> Option<String> {
    let ua = headers
        .iter()
        .find(|(k, _)| k.eq_ignore_ascii_case("user-agent"))
        .map(|(_, v)| v.trim())?;
    let product = ua.split(|c: char| c == '/' || c.is_whitespace()).next()?;
    (!product.is_empty()).then(|| product.to_string())
}

/// One leaked PII value.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Leak {
    pub pii: PiiType,
    pub value: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct GroundTruthLabel {
    pub flow_id: String,
    pub leaks: Vec<Leak>,
}

#[derive(Serialize, Deserialize)]
struct LabelLine {
    id: String,
    leaks: Vec<LeakLine>,
}

#[derive(Serialize, Deserialize)]
struct LeakLine {
    category: String,
    kind: String,
    value: String,
}

impl GroundTruthLabel {
    pub fn parse_line(line: &str) -> Result<GroundTruthLabel> {
        let raw: LabelLine =
            serde_json::from_str(line.trim()).map_err(|e| Error::Label(e.to_string()))?;
        let mut leaks = Vec::with_capacity(raw.leaks.len());
        for l in raw.leaks {
            let pii: PiiType = l.kind.parse().map_err(Error::Label)?;
            let cat: PiiCategory = l.category.parse().map_err(Error::Label)?;
            if pii.category() != cat {
                return Err(Error::Label(format!("{pii} does not belong to category {cat}")));
            }
            if l.value.is_empty() {
                return Err(Error::Label(format!("empty value for {pii} in `{}`", raw.id)));
            }
            leaks.push(Leak { pii, value: l.value });
        }
        Ok(GroundTruthLabel { flow_id: raw.id, leaks })
    }

    pub fn to_json_line(&self) -> String {
        let line = LabelLine {
            id: self.flow_id.clone(),
            leaks: self
                .leaks
                .iter()
                .map(|l| LeakLine {
                    category: l.pii.category().to_string(),
                    kind: l.pii.to_string(),
                    value: l.value.clone(),
                })
                .collect(),
        };
        serde_json::to_string(&line).expect("labels always serialize")
    }
}

/// An analyzed flow with its ground truth; positive iff it leaks anything.
#[derive(Debug, Clone)]
pub struct Example {
    pub flow: AnalyzedFlow,
    pub leaks: Vec<Leak>,
}

impl Example {
    pub fn id(&self) -> &str {
        &self.flow.flow.id
    }

    pub fn is_positive(&self) -> bool {
        !self.leaks.is_empty()
    }
}

/// Pairs analyzed flows with their labels by flow id. Flows without a label
/// are dropped, since their truth is unknown.
pub fn label_examples(flows: Vec<AnalyzedFlow>, labels: &[GroundTruthLabel]) -> Vec<Example> {
    let by_id: std::collections::HashMap<&str, &GroundTruthLabel> =
        labels.iter().map(|l| (l.flow_id.as_str(), l)).collect();
    let mut out = Vec::with_capacity(flows.len());
    let mut unlabeled = 0usize;
    for f in flows {
        match by_id.get(f.flow.id.as_str()) {
            Some(l) => out.push(Example { flow: f, leaks: l.leaks.clone() }),
            None => unlabeled += 1,
        }
    }
    if unlabeled > 0 {
        log::warn!("{unlabeled} flows have no label and were left out");
    }
    out
}

mod b64_bytes {
    use super::B64;
    use base64::Engine as _;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(bytes: &[u8], s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&B64.encode(bytes))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<u8>, D::Error> {
        let s = String::deserialize(d)?;
        B64.decode(s.as_bytes()).map_err(serde::de::Error::custom)
    }
}
