//! User control rules: block a flow, or remove or replace the PII values
//! extracted from it.
//!
//! Rewriting works on the flow record. Extraction spans index the decoded
//! text, so each edit is mapped back through the decoder's offset map to
//! the raw query or (inflated) body bytes, the replacement is encoded for
//! its context, and the body is re-compressed when it arrived compressed.

use std::io::Write;

use flate2::write::{GzEncoder, ZlibEncoder};
use flate2::Compression;
use serde::{Deserialize, Serialize};

use crate::decode::{decode_body, decode_body_mapped, decode_query_mapped, percent_encode};
use crate::error::{Error, Result};
use crate::extract::Extraction;
use crate::flow::{extract_kv_pairs, Flow, KvSource, PiiCategory, PiiType};
use crate::registry::PredictionRecord;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum RuleScope {
    ByCategory(PiiCategory),
    ByDomain(String),
    ByApp(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum RuleAction {
    Block,
    Remove,
    Replace(String),
}

impl RuleAction {
    fn rank(&self) -> u8 {
        match self {
            RuleAction::Block => 0,
            RuleAction::Remove => 1,
            RuleAction::Replace(_) => 2,
        }
    }
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RewriteRule {
    /// Left empty on creation to have the engine assign one.
    #[serde(default)]
    pub rule_id: String,
    pub scope: RuleScope,
    #[serde(default)]
    pub pii_filter: Option<PiiType>,
    pub action: RuleAction,
    #[serde(default = "default_true")]
    pub enabled: bool,
    #[serde(default)]
    pub created_by: String,
}

impl RewriteRule {
    /// Field-level problems, empty when the rule is valid.
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.rule_id.trim().is_empty() {
            out.push("rule_id: must not be empty".to_string());
        }
        match &self.scope {
            RuleScope::ByDomain(d) if d.trim().is_empty() => out.push("scope.ByDomain: must not be empty".into()),
            RuleScope::ByApp(a) if a.trim().is_empty() => out.push("scope.ByApp: must not be empty".into()),
            _ => {}
        }
        if let (RuleScope::ByCategory(c), Some(p)) = (&self.scope, self.pii_filter) {
            if p.category() != *c {
                out.push(format!("pii_filter: {p} is not in category {}", c.as_str()));
            }
        }
        if let RuleAction::Replace(r) = &self.action {
            if r.is_empty() {
                out.push("action.Replace: replacement must not be empty".into());
            }
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.problems();
        if p.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidRule(p))
        }
    }

    /// Whether this rule acts on `ex` in a flow its scope already matched.
    fn covers(&self, ex: &Extraction) -> bool {
        let category_ok = match &self.scope {
            RuleScope::ByCategory(c) => ex.pii.category() == *c,
            _ => true,
        };
        category_ok && self.pii_filter.is_none_or(|p| p == ex.pii)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Decision {
    Pass,
    Blocked,
    Modified,
}

/// `modified_flow` is set only for `Modified`; on `Pass` the original flow
/// goes through untouched.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewriteOutcome {
    pub decision: Decision,
    pub modified_flow: Option<Flow>,
    pub applied_rules: Vec<String>,
}

impl RewriteOutcome {
    fn pass() -> Self {
        RewriteOutcome { decision: Decision::Pass, modified_flow: None, applied_rules: Vec::new() }
    }

    /// The flow to forward, if any.
    pub fn output<'a>(&'a self, original: &'a Flow) -> Option<&'a Flow> {
        match self.decision {
            Decision::Pass => Some(original),
            Decision::Blocked => None,
            Decision::Modified => self.modified_flow.as_ref(),
        }
    }
}

fn domain_matches(flow: &Flow, domain: &str) -> bool {
    let d = domain.trim().trim_start_matches('.').to_ascii_lowercase();
    if flow.domain.eq_ignore_ascii_case(&d) {
        return true;
    }
    let host = flow.host.as_deref().unwrap_or("").to_ascii_lowercase();
    host == d || host.ends_with(&format!(".{d}"))
}

/// Enabled rules that apply to a positive prediction, Block first, then
/// Remove, then Replace, ties by `rule_id`.
pub fn match_rules<'r>(prediction: &PredictionRecord, flow: &Flow, rules: &'r [RewriteRule]) -> Vec<&'r RewriteRule> {
    if !prediction.positive {
        return Vec::new();
    }
    let mut out: Vec<&RewriteRule> = rules
        .iter()
        .filter(|r| r.enabled)
        .filter(|r| match &r.scope {
            RuleScope::ByCategory(c) => prediction.extracted.iter().any(|e| e.pii.category() == *c),
            RuleScope::ByDomain(d) => domain_matches(flow, d),
            RuleScope::ByApp(a) => flow.app_id.as_deref() == Some(a.as_str()),
        })
        .filter(|r| r.pii_filter.is_none_or(|p| prediction.extracted.iter().any(|e| e.pii == p)))
        .collect();
    out.sort_by(|a, b| a.action.rank().cmp(&b.action.rank()).then_with(|| a.rule_id.cmp(&b.rule_id)));
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Region {
    Query,
    Body,
}

#[derive(Debug, Clone)]
struct Edit {
    region: Region,
    start: usize,
    end: usize,
    bytes: Vec<u8>,
}

fn json_escape(s: &str) -> String {
    let quoted = serde_json::to_string(s).expect("strings always serialize");
    quoted[1..quoted.len() - 1].to_string()
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;").replace('\'', "&apos;")
}

/// Widens a form pair's byte range to swallow one `&` separator.
fn widen_form_pair(src: &[u8], start: usize, end: usize) -> (usize, usize) {
    if src.get(end) == Some(&b'&') {
        (start, end + 1)
    } else if start > 0 && src[start - 1] == b'&' {
        (start - 1, end)
    } else {
        (start, end)
    }
}

/// Widens a JSON member's byte range to swallow one neighbouring comma.
fn widen_json_member(src: &[u8], start: usize, end: usize) -> (usize, usize) {
    let mut after = end;
    while after < src.len() && src[after].is_ascii_whitespace() {
        after += 1;
    }
    if src.get(after) == Some(&b',') {
        after += 1;
        while after < src.len() && src[after].is_ascii_whitespace() {
            after += 1;
        }
        return (start, after);
    }
    let mut before = start;
    while before > 0 && src[before - 1].is_ascii_whitespace() {
        before -= 1;
    }
    if before > 0 && src[before - 1] == b',' {
        return (before - 1, end);
    }
    (start, end)
}

/// Whether the JSON value at `value_start` is the direct value of the member
/// whose key opens at `key_open` (as opposed to an array element).
fn is_member_value(src: &[u8], key_open: usize, value_start: usize) -> bool {
    let mut i = value_start;
    while i > key_open && src[i - 1].is_ascii_whitespace() {
        i -= 1;
    }
    i > key_open && src[i - 1] == b':'
}

fn plan_edit(
    flow: &Flow,
    ex: &Extraction,
    replacement: Option<&str>,
    query: &crate::decode::Decoded,
    body: &crate::decode::Decoded,
) -> Option<Edit> {
    let kv_text = flow.kv_text();
    if kv_text.get(ex.span.start..ex.span.end()) != Some(ex.value.as_str()) {
        log::warn!("flow {}: extraction span for `{}` does not match the flow; skipped", flow.id, ex.key);
        return None;
    }
    let pair = flow.kv_pairs.iter().find(|p| p.value_span == ex.span);
    let source = pair.map_or(KvSource::Freeform, |p| p.source);
    let body_offset = flow.body_offset();
    let (region, decoded, offset) = if ex.span.end() <= flow.decoded_query.len() {
        (Region::Query, query, 0)
    } else if ex.span.start >= body_offset {
        (Region::Body, body, body_offset)
    } else {
        return None;
    };
    let (start, end) = decoded.source_range(ex.span.start - offset, ex.span.end() - offset);
    let src = &decoded.source;
    let pair_range = pair.map(|p| decoded.source_range(p.pair_span.start - offset, p.pair_span.end() - offset));
    let edit = |start, end, bytes: String| Some(Edit { region, start, end, bytes: bytes.into_bytes() });

    match source {
        KvSource::QueryParam | KvSource::FormBody if decoded.urlencoded => match (replacement, pair_range) {
            (None, Some((ps, pe))) => {
                let (s, e) = widen_form_pair(src, ps, pe);
                edit(s, e, String::new())
            }
            _ => edit(start, end, percent_encode(replacement.unwrap_or(""))),
        },
        KvSource::JsonBody => {
            let quoted = start > 0 && src[start - 1] == b'"' && src.get(end) == Some(&b'"');
            match (replacement, pair_range) {
                (None, Some((ps, pe))) if is_member_value(src, ps, if quoted { start - 1 } else { start }) => {
                    let (s, e) = widen_json_member(src, ps, pe);
                    edit(s, e, String::new())
                }
                (None, _) if quoted => edit(start, end, String::new()),
                (None, _) => edit(start, end, "null".into()),
                (Some(r), _) if quoted => edit(start, end, json_escape(r)),
                (Some(r), _) => edit(start, end, format!("\"{}\"", json_escape(r))),
            }
        }
        KvSource::XmlBody => edit(start, end, xml_escape(replacement.unwrap_or(""))),
        _ if decoded.urlencoded => edit(start, end, percent_encode(replacement.unwrap_or(""))),
        _ => edit(start, end, replacement.unwrap_or("").to_string()),
    }
}

/// Keeps the leftmost edit at each position, longest first, and drops any
/// edit overlapping one already kept. Overlapping deletions (two removed
/// pairs sharing a separator) are merged instead.
fn resolve_overlaps(mut edits: Vec<Edit>) -> Vec<Edit> {
    edits.sort_by(|a, b| a.start.cmp(&b.start).then((b.end - b.start).cmp(&(a.end - a.start))));
    let mut kept: Vec<Edit> = Vec::new();
    for e in edits {
        match kept.last_mut() {
            Some(k) if e.start < k.end && k.bytes.is_empty() && e.bytes.is_empty() => {
                k.end = k.end.max(e.end);
            }
            Some(k) if e.start < k.end || (e.start == k.start && e.start == e.end) => {
                log::debug!("dropping overlapping edit at {}..{}", e.start, e.end);
            }
            _ => kept.push(e),
        }
    }
    kept
}

fn apply(src: &[u8], edits: &[Edit]) -> Vec<u8> {
    let mut out = Vec::with_capacity(src.len());
    let mut pos = 0;
    for e in edits {
        out.extend_from_slice(&src[pos..e.start]);
        out.extend_from_slice(&e.bytes);
        pos = e.end;
    }
    out.extend_from_slice(&src[pos..]);
    out
}

fn compress(bytes: &[u8], encoding: &str) -> Vec<u8> {
    let result = match encoding {
        "deflate" => {
            let mut z = ZlibEncoder::new(Vec::new(), Compression::default());
            z.write_all(bytes).and_then(|_| z.finish())
        }
        _ => {
            let mut g = GzEncoder::new(Vec::new(), Compression::default());
            g.write_all(bytes).and_then(|_| g.finish())
        }
    };
    result.expect("in-memory compression cannot fail")
}

fn set_content_length(flow: &mut Flow) {
    let len = flow.body.len().to_string();
    match flow.headers.iter_mut().find(|(k, _)| k.eq_ignore_ascii_case("content-length")) {
        Some((_, v)) => *v = len,
        None if !flow.body.is_empty() => flow.headers.push(("Content-Length".to_string(), len)),
        None => {}
    }
}

/// Applies `rules` to `flow` given its prediction. A matching Block rule
/// blocks the flow; otherwise each extracted value covered by a Remove or
/// Replace rule is rewritten (the first such rule in match order wins).
/// `flow` must carry its decoded text and key/value pairs.
pub fn rewrite(flow: &Flow, prediction: &PredictionRecord, rules: &[RewriteRule]) -> RewriteOutcome {
    let matched = match_rules(prediction, flow, rules);
    if matched.is_empty() {
        return RewriteOutcome::pass();
    }
    let blocks: Vec<String> =
        matched.iter().filter(|r| r.action == RuleAction::Block).map(|r| r.rule_id.clone()).collect();
    if !blocks.is_empty() {
        return RewriteOutcome { decision: Decision::Blocked, modified_flow: None, applied_rules: blocks };
    }

    let query = decode_query_mapped(&flow.query);
    let body = decode_body_mapped(flow);
    let mut edits = Vec::new();
    let mut applied: Vec<String> = Vec::new();
    for ex in &prediction.extracted {
        let Some(rule) = matched.iter().find(|r| r.covers(ex)) else { continue };
        let replacement = match &rule.action {
            RuleAction::Replace(r) => Some(r.as_str()),
            _ => None,
        };
        if let Some(e) = plan_edit(flow, ex, replacement, &query, &body) {
            edits.push(e);
            if !applied.contains(&rule.rule_id) {
                applied.push(rule.rule_id.clone());
            }
        }
    }
    if edits.is_empty() {
        return RewriteOutcome::pass();
    }

    let (q_edits, b_edits): (Vec<Edit>, Vec<Edit>) = edits.into_iter().partition(|e| e.region == Region::Query);
    let mut out = flow.clone();
    let q_edits = resolve_overlaps(q_edits);
    if !q_edits.is_empty() {
        out.query = String::from_utf8(apply(&query.source, &q_edits)).expect("query edits keep UTF-8");
    }
    let b_edits = resolve_overlaps(b_edits);
    if !b_edits.is_empty() {
        let new_body = apply(&body.source, &b_edits);
        out.body = if body.inflated {
            let enc = flow.content_encoding.as_deref().unwrap_or("").trim().to_ascii_lowercase();
            compress(&new_body, &enc)
        } else {
            new_body
        };
        set_content_length(&mut out);
    }
    decode_body(&mut out);
    extract_kv_pairs(&mut out);
    if out == *flow {
        return RewriteOutcome::pass();
    }
    RewriteOutcome { decision: Decision::Modified, modified_flow: Some(out), applied_rules: applied }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow::{Os, Span};
    use crate::registry::ClassifierKey;
    use crate::tokenize::Tokenizer;

    fn analyzed(query: &str, body: &str, ctype: &str) -> Flow {
        let mut f = Flow::new("f1", Os::Android, Some("a.applovin.com"), "POST", "/sdk")
            .with_query(query)
            .with_body(body.as_bytes().to_vec(), Some(ctype));
        f.headers.push(("Content-Length".into(), body.len().to_string()));
        Tokenizer::default().analyze(f).flow
    }

    fn extraction(flow: &Flow, key: &str, pii: PiiType) -> Extraction {
        let p = flow.kv_pairs.iter().find(|p| p.key == key).expect("pair present");
        Extraction { pii, key: key.into(), value: p.value.clone(), span: p.value_span }
    }

    fn prediction(flow: &Flow, extracted: Vec<Extraction>) -> PredictionRecord {
        PredictionRecord {
            prediction_id: flow.id.clone(),
            flow_id: flow.id.clone(),
            ts_ms: 0,
            domain: flow.domain.clone(),
            os: flow.os,
            app_id: flow.app_id.clone(),
            classifier_key: ClassifierKey::General,
            positive: true,
            score: 1.0,
            extracted,
            model_version: 1,
            generation: 1,
            unmodeled: false,
            unextracted: false,
            micros: 0.0,
        }
    }

    fn rule(id: &str, scope: RuleScope, action: RuleAction) -> RewriteRule {
        RewriteRule { rule_id: id.into(), scope, pii_filter: None, action, enabled: true, created_by: "u".into() }
    }

    #[test]
    fn replace_in_form_body_updates_length() {
        let f = analyzed("", "idfa=AAAA&x=1", "application/x-www-form-urlencoded");
        let p = prediction(&f, vec![extraction(&f, "idfa", PiiType::AdvertiserId)]);
        let rules = [rule("r1", RuleScope::ByDomain("applovin.com".into()), RuleAction::Replace("XXXX".into()))];
        let out = rewrite(&f, &p, &rules);
        assert_eq!(out.decision, Decision::Modified);
        let m = out.modified_flow.unwrap();
        assert_eq!(m.body, b"idfa=XXXX&x=1");
        assert_eq!(m.header("content-length"), Some("13"));
        assert_eq!(out.applied_rules, vec!["r1"]);
    }

    #[test]
    fn adjacent_removals_share_a_separator() {
        let f = analyzed("idfa=AAAA&email=jo@x.org&zip=01306", "", "text/plain");
        let p = prediction(
            &f,
            vec![
                extraction(&f, "idfa", PiiType::AdvertiserId),
                extraction(&f, "email", PiiType::EmailAddress),
                extraction(&f, "zip", PiiType::ZipCode),
            ],
        );
        let rules = [rule("r", RuleScope::ByDomain("applovin.com".into()), RuleAction::Remove)];
        assert_eq!(rewrite(&f, &p, &rules).modified_flow.unwrap().query, "");
    }

    #[test]
    fn remove_drops_whole_form_pair() {
        let f = analyzed("a=1&imei=353918051234563&b=2", "", "text/plain");
        let p = prediction(&f, vec![extraction(&f, "imei", PiiType::Imei)]);
        let rules = [rule("r", RuleScope::ByCategory(PiiCategory::DeviceIdentifier), RuleAction::Remove)];
        let m = rewrite(&f, &p, &rules).modified_flow.unwrap();
        assert_eq!(m.query, "a=1&b=2");
    }

    #[test]
    fn json_member_removed_and_string_replaced() {
        let body = r#"{"email":"jo@x.org","lat":37.5,"n":1}"#;
        let f = analyzed("", body, "application/json");
        let p = prediction(&f, vec![extraction(&f, "email", PiiType::EmailAddress), extraction(&f, "lat", PiiType::GpsCoordinate)]);
        let mut r = rule("a", RuleScope::ByDomain("applovin.com".into()), RuleAction::Remove);
        r.pii_filter = Some(PiiType::EmailAddress);
        let rules = [r, rule("b", RuleScope::ByCategory(PiiCategory::Location), RuleAction::Replace("0\"".into()))];
        let m = rewrite(&f, &p, &rules).modified_flow.unwrap();
        let text = String::from_utf8(m.body.clone()).unwrap();
        assert_eq!(text, r#"{"lat":"0\"","n":1}"#);
        serde_json::from_str::<serde_json::Value>(&text).unwrap();
    }

    #[test]
    fn block_wins_and_negative_passes() {
        let f = analyzed("idfa=AAAA", "", "text/plain");
        let p = prediction(&f, vec![extraction(&f, "idfa", PiiType::AdvertiserId)]);
        let rules = [
            rule("z-replace", RuleScope::ByDomain("applovin.com".into()), RuleAction::Replace("X".into())),
            rule("a-block", RuleScope::ByCategory(PiiCategory::DeviceIdentifier), RuleAction::Block),
        ];
        let order: Vec<&str> = match_rules(&p, &f, &rules).iter().map(|r| r.rule_id.as_str()).collect();
        assert_eq!(order, ["a-block", "z-replace"]);
        let out = rewrite(&f, &p, &rules);
        assert_eq!(out.decision, Decision::Blocked);
        assert!(out.output(&f).is_none());

        let mut neg = p.clone();
        neg.positive = false;
        let out = rewrite(&f, &neg, &rules);
        assert_eq!(out.decision, Decision::Pass);
        assert_eq!(out.output(&f), Some(&f));
    }

    #[test]
    fn category_scope_needs_matching_kind() {
        let f = analyzed("idfa=AAAA", "", "text/plain");
        let p = prediction(&f, vec![extraction(&f, "idfa", PiiType::AdvertiserId)]);
        let rules = [rule("loc", RuleScope::ByCategory(PiiCategory::Location), RuleAction::Block)];
        assert!(match_rules(&p, &f, &rules).is_empty());
    }

    #[test]
    fn gzip_body_is_recompressed() {
        use flate2::read::GzDecoder;
        use std::io::Read;
        let mut f = Flow::new("g", Os::Ios, Some("api.x.com"), "POST", "/")
            .with_body(compress(b"imei=353918051234563", "gzip"), Some("application/x-www-form-urlencoded"));
        f.content_encoding = Some("gzip".into());
        let f = Tokenizer::default().analyze(f).flow;
        let p = prediction(&f, vec![extraction(&f, "imei", PiiType::Imei)]);
        let rules = [rule("r", RuleScope::ByDomain("x.com".into()), RuleAction::Replace("0".into()))];
        let m = rewrite(&f, &p, &rules).modified_flow.unwrap();
        let mut plain = String::new();
        GzDecoder::new(&m.body[..]).read_to_string(&mut plain).unwrap();
        assert_eq!(plain, "imei=0");
        assert_eq!(m.header("Content-Length"), Some(m.body.len().to_string().as_str()));
    }

    #[test]
    fn overlapping_spans_keep_leftmost_longest() {
        let f = analyzed("k=abcdef", "", "text/plain");
        let pair = &f.kv_pairs[0];
        let a = Extraction { pii: PiiType::Username, key: "k".into(), value: "abcdef".into(), span: pair.value_span };
        let b = Extraction {
            pii: PiiType::Username,
            key: "k".into(),
            value: "cd".into(),
            span: Span::new(pair.value_span.start + 2, 2),
        };
        let p = prediction(&f, vec![b, a]);
        let rules = [rule("r", RuleScope::ByDomain("applovin.com".into()), RuleAction::Replace("Z".into()))];
        assert_eq!(rewrite(&f, &p, &rules).modified_flow.unwrap().query, "k=Z");
    }

    #[test]
    fn invalid_rules_name_fields() {
        let mut r = rule("", RuleScope::ByDomain(" ".into()), RuleAction::Replace(String::new()));
        r.pii_filter = Some(PiiType::Imei);
        let p = r.problems();
        assert_eq!(p.len(), 3, "{p:?}");
        assert!(matches!(r.validate(), Err(Error::InvalidRule(_))));
        let json = r#"{"rule_id":"x","scope":{"ByCategory":"Location"},"pii_filter":"IMEI","action":"Block"}"#;
        let r: RewriteRule = serde_json::from_str(json).unwrap();
        assert!(r.enabled);
        assert_eq!(r.problems().len(), 1);
    }
}
