//! Key/value pair extraction from a flow's decoded query and body.

use serde::{Deserialize, Serialize};

use super::{Flow, KeyValuePair, Span};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum KvSource {
    QueryParam,
    FormBody,
    JsonBody,
    XmlBody,
    HeaderLine,
    Freeform,
}

const MAX_JSON_DEPTH: usize = 128;

/// Parses the query and body of `flow` into key/value pairs and stores them in
/// `flow.kv_pairs`. Expects [`crate::decode::decode_body`] to have run.
pub fn extract_kv_pairs(flow: &mut Flow) -> Vec<KeyValuePair> {
    let text = flow.kv_text();
    let mut out = Vec::new();
    let q_end = flow.decoded_query.len();
    parse_form(&text, 0, q_end, KvSource::QueryParam, &mut out);

    let body_start = flow.body_offset();
    let body = &text[body_start..];
    let trimmed = body.trim_start();
    let ctype = flow.content_type.as_deref().unwrap_or("").to_ascii_lowercase();
    if !body.trim().is_empty() {
        if ctype.contains("json") || trimmed.starts_with('{') || trimmed.starts_with('[') {
            let mut json = JsonScanner { text: &text, pos: body_start, out: Vec::new() };
            if json.parse_document() {
                out.append(&mut json.out);
            } else {
                parse_lines(&text, body_start, text.len(), &mut out);
            }
        } else if ctype.contains("xml") || trimmed.starts_with('<') {
            parse_xml(&text, body_start, &mut out);
        } else if ctype.contains("x-www-form-urlencoded") || looks_like_form(body) {
            parse_form(&text, body_start, text.len(), KvSource::FormBody, &mut out);
        } else {
            parse_lines(&text, body_start, text.len(), &mut out);
        }
    }
    flow.kv_pairs = out.clone();
    out
}

fn looks_like_form(body: &str) -> bool {
    let b = body.trim();
    b.contains('=') && !b.contains("=>") && !b.chars().any(char::is_whitespace)
}

fn trim_bounds(text: &str, mut start: usize, mut end: usize) -> (usize, usize) {
    let bytes = text.as_bytes();
    while start < end && bytes[start].is_ascii_whitespace() {
        start += 1;
    }
    while end > start && bytes[end - 1].is_ascii_whitespace() {
        end -= 1;
    }
    (start, end)
}

fn push_pair(
    out: &mut Vec<KeyValuePair>,
    text: &str,
    key: (usize, usize),
    value: (usize, usize),
    source: KvSource,
) {
    out.push(KeyValuePair {
        key: text[key.0..key.1].to_string(),
        value: text[value.0..value.1].to_string(),
        source,
        value_span: Span::from_bounds(value.0, value.1),
        pair_span: Span::from_bounds(key.0.min(value.0), value.1.max(key.1)),
    });
}

fn push_freeform(out: &mut Vec<KeyValuePair>, text: &str, start: usize, end: usize) {
    let (s, e) = trim_bounds(text, start, end);
    if s < e {
        out.push(KeyValuePair {
            key: String::new(),
            value: text[s..e].to_string(),
            source: KvSource::Freeform,
            value_span: Span::from_bounds(s, e),
            pair_span: Span::from_bounds(s, e),
        });
    }
}

fn parse_form(text: &str, start: usize, end: usize, source: KvSource, out: &mut Vec<KeyValuePair>) {
    let mut piece_start = start;
    for (i, b) in text.as_bytes()[start..end].iter().enumerate().map(|(i, b)| (start + i, *b)).chain(std::iter::once((end, b'&'))) {
        if b != b'&' {
            continue;
        }
        let piece = &text[piece_start..i];
        match piece.find('=') {
            Some(eq) if eq > 0 => {
                push_pair(out, text, (piece_start, piece_start + eq), (piece_start + eq + 1, i), source)
            }
            _ => push_freeform(out, text, piece_start, i),
        }
        piece_start = i + 1;
    }
}

fn parse_lines(text: &str, start: usize, end: usize, out: &mut Vec<KeyValuePair>) {
    let mut line_start = start;
    for i in (start..end).chain(std::iter::once(end)) {
        if i < end && text.as_bytes()[i] != b'\n' {
            continue;
        }
        parse_line(text, line_start, i, out);
        line_start = i + 1;
    }
}

fn parse_line(text: &str, start: usize, end: usize, out: &mut Vec<KeyValuePair>) {
    let (s, e) = trim_bounds(text, start, end);
    if s >= e {
        return;
    }
    let line = &text[s..e];
    if let Some(arrow) = line.find("=>") {
        let key = trim_bounds(text, s, s + arrow);
        let value = trim_bounds(text, s + arrow + 2, e);
        if key.0 < key.1 {
            push_pair(out, text, key, value, KvSource::HeaderLine);
            return;
        }
    }
    if let Some(colon) = line.find(':') {
        let key = trim_bounds(text, s, s + colon);
        let key_str = &text[key.0..key.1];
        if !key_str.is_empty() && !key_str.contains(char::is_whitespace) {
            let value = trim_bounds(text, s + colon + 1, e);
            push_pair(out, text, key, value, KvSource::HeaderLine);
            return;
        }
    }
    if line.contains('=') && !line.contains(char::is_whitespace) {
        parse_form(text, s, e, KvSource::FormBody, out);
        return;
    }
    push_freeform(out, text, s, e);
}

struct JsonScanner<'a> {
    text: &'a str,
    pos: usize,
    out: Vec<KeyValuePair>,
}

impl JsonScanner<'_> {
    fn parse_document(&mut self) -> bool {
        if self.value(None, 0).is_none() {
            return false;
        }
        self.skip_ws();
        self.pos == self.text.len()
    }

    fn peek(&self) -> Option<u8> {
        self.text.as_bytes().get(self.pos).copied()
    }

    fn skip_ws(&mut self) {
        while matches!(self.peek(), Some(b' ' | b'\t' | b'\n' | b'\r')) {
            self.pos += 1;
        }
    }

    fn expect(&mut self, b: u8) -> Option<()> {
        self.skip_ws();
        (self.peek() == Some(b)).then(|| self.pos += 1)
    }

    /// Scans a string starting at the opening quote; returns the content bounds.
    fn string(&mut self) -> Option<(usize, usize)> {
        if self.peek() != Some(b'"') {
            return None;
        }
        self.pos += 1;
        let start = self.pos;
        loop {
            match self.peek()? {
                b'"' => {
                    let end = self.pos;
                    self.pos += 1;
                    return Some((start, end));
                }
                b'\\' => self.pos += 2,
                _ => self.pos += 1,
            }
        }
    }

    /// `key` is (dotted path, start of the member's key for pair spans).
    fn value(&mut self, key: Option<(&str, usize)>, depth: usize) -> Option<()> {
        if depth > MAX_JSON_DEPTH {
            return None;
        }
        self.skip_ws();
        match self.peek()? {
            b'{' => {
                self.pos += 1;
                self.skip_ws();
                if self.peek() == Some(b'}') {
                    self.pos += 1;
                    return Some(());
                }
                loop {
                    self.skip_ws();
                    let key_open = self.pos;
                    let (ks, ke) = self.string()?;
                    let name = &self.text[ks..ke];
                    let path = match key {
                        Some((p, _)) if !p.is_empty() => format!("{p}.{name}"),
                        _ => name.to_string(),
                    };
                    self.expect(b':')?;
                    self.value(Some((&path, key_open)), depth + 1)?;
                    self.skip_ws();
                    match self.peek()? {
                        b',' => self.pos += 1,
                        b'}' => {
                            self.pos += 1;
                            return Some(());
                        }
                        _ => return None,
                    }
                }
            }
            b'[' => {
                self.pos += 1;
                self.skip_ws();
                if self.peek() == Some(b']') {
                    self.pos += 1;
                    return Some(());
                }
                loop {
                    self.value(key, depth + 1)?;
                    self.skip_ws();
                    match self.peek()? {
                        b',' => self.pos += 1,
                        b']' => {
                            self.pos += 1;
                            return Some(());
                        }
                        _ => return None,
                    }
                }
            }
            b'"' => {
                let (s, e) = self.string()?;
                self.emit(key, s, e, e + 1);
                Some(())
            }
            _ => {
                let s = self.pos;
                while let Some(b) = self.peek() {
                    if matches!(b, b',' | b'}' | b']' | b' ' | b'\t' | b'\n' | b'\r') {
                        break;
                    }
                    self.pos += 1;
                }
                let token = &self.text[s..self.pos];
                let valid = matches!(token, "true" | "false" | "null")
                    || (!token.is_empty() && token.parse::<f64>().is_ok());
                if !valid {
                    return None;
                }
                self.emit(key, s, self.pos, self.pos);
                Some(())
            }
        }
    }

    fn emit(&mut self, key: Option<(&str, usize)>, s: usize, e: usize, pair_end: usize) {
        let (path, key_open) = match key {
            Some((p, k)) if !p.is_empty() => (p.to_string(), k),
            _ => {
                push_freeform(&mut self.out, self.text, s, e);
                return;
            }
        };
        self.out.push(KeyValuePair {
            key: path,
            value: self.text[s..e].to_string(),
            source: KvSource::JsonBody,
            value_span: Span::from_bounds(s, e),
            pair_span: Span::from_bounds(key_open, pair_end),
        });
    }
}

fn parse_xml(text: &str, start: usize, out: &mut Vec<KeyValuePair>) {
    let bytes = text.as_bytes();
    let mut pos = start;
    let find = |from: usize, pat: u8| bytes[from..].iter().position(|&b| b == pat).map(|p| from + p);
    while let Some(lt) = find(pos, b'<') {
        if text[lt..].starts_with("<!--") {
            pos = text[lt..].find("-->").map(|p| lt + p + 3).unwrap_or(text.len());
            continue;
        }
        let Some(gt) = find(lt, b'>') else { break };
        pos = gt + 1;
        let next = bytes.get(lt + 1).copied();
        if matches!(next, Some(b'/' | b'?' | b'!')) {
            continue;
        }
        let inner_end = if bytes[gt - 1] == b'/' { gt - 1 } else { gt };
        let self_closing = inner_end != gt;
        let inner = &text[lt + 1..inner_end];
        let name_len = inner.find(|c: char| c.is_whitespace()).unwrap_or(inner.len());
        let name = &inner[..name_len];
        if name.is_empty() {
            continue;
        }
        // attributes: name="value" or name='value'
        let mut i = lt + 1 + name_len;
        while i < inner_end {
            let Some(eq) = text[i..inner_end].find('=').map(|p| i + p) else { break };
            let key = trim_bounds(text, i, eq);
            let mut q = eq + 1;
            while q < inner_end && bytes[q].is_ascii_whitespace() {
                q += 1;
            }
            if q >= inner_end || !matches!(bytes[q], b'"' | b'\'') {
                break;
            }
            let quote = bytes[q];
            let Some(close) = bytes[q + 1..inner_end].iter().position(|&b| b == quote).map(|p| q + 1 + p)
            else {
                break;
            };
            if key.0 < key.1 {
                push_pair(out, text, key, (q + 1, close), KvSource::XmlBody);
            }
            i = close + 1;
        }
        if self_closing {
            continue;
        }
        let text_end = find(pos, b'<').unwrap_or(text.len());
        let (s, e) = trim_bounds(text, pos, text_end);
        if s < e {
            out.push(KeyValuePair {
                key: name.to_string(),
                value: text[s..e].to_string(),
                source: KvSource::XmlBody,
                value_span: Span::from_bounds(s, e),
                pair_span: Span::from_bounds(lt, e),
            });
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow::Os;

    fn flow(query: &str, body: &str, ctype: Option<&str>) -> Flow {
        Flow {
            id: "t".into(),
            ts_ms: 0,
            os: Os::Android,
            host: None,
            domain: String::new(),
            app_id: None,
            method: "POST".into(),
            path: "/".into(),
            query: query.into(),
            headers: vec![],
            body: body.as_bytes().to_vec(),
            content_type: ctype.map(String::from),
            content_encoding: None,
            decoded_query: query.into(),
            decoded_text: body.into(),
            decode_degraded: false,
            kv_pairs: vec![],
        }
    }

    fn pairs(f: &mut Flow) -> Vec<(String, String)> {
        extract_kv_pairs(f).into_iter().map(|p| (p.key, p.value)).collect()
    }

    fn assert_spans(f: &Flow) {
        let text = f.kv_text();
        for p in &f.kv_pairs {
            assert_eq!(p.value_span.slice(&text), p.value, "{p:?}");
            assert!(p.pair_span.start <= p.value_span.start && p.value_span.end() <= p.pair_span.end());
        }
    }

    #[test]
    fn query_string() {
        let mut f = flow("username=user007&device_id=X", "", None);
        assert_eq!(
            pairs(&mut f),
            vec![("username".into(), "user007".into()), ("device_id".into(), "X".into())]
        );
        assert_spans(&f);
        assert!(f.kv_pairs.iter().all(|p| p.source == KvSource::QueryParam));
    }

    #[test]
    fn json_uses_dotted_paths() {
        let mut f = flow("", r#"{"a":{"idfa":"Z"}}"#, Some("application/json"));
        assert_eq!(pairs(&mut f), vec![("a.idfa".into(), "Z".into())]);
        assert_spans(&f);
    }

    #[test]
    fn json_arrays_drop_indices() {
        let mut f = flow("", r#"{"ids":[{"mac":"02:00:00:00:00:00"},{"mac":"x"}],"n":3,"ok":true}"#, None);
        assert_eq!(
            pairs(&mut f),
            vec![
                ("ids.mac".into(), "02:00:00:00:00:00".into()),
                ("ids.mac".into(), "x".into()),
                ("n".into(), "3".into()),
                ("ok".into(), "true".into())
            ]
        );
        assert_spans(&f);
    }

    #[test]
    fn arrow_delimiter() {
        let mut f = flow("", "username => user007", Some("text/plain"));
        assert_eq!(pairs(&mut f), vec![("username".into(), "user007".into())]);
        assert_eq!(f.kv_pairs[0].source, KvSource::HeaderLine);
        assert_spans(&f);
    }

    #[test]
    fn header_like_lines_and_freeform() {
        let mut f = flow("", "imei: 356938035643809\nhello world\n", Some("text/plain"));
        let p = pairs(&mut f);
        assert_eq!(p[0], ("imei".into(), "356938035643809".into()));
        assert_eq!(p[1], ("".into(), "hello world".into()));
        assert_eq!(f.kv_pairs[1].source, KvSource::Freeform);
        assert_spans(&f);
    }

    #[test]
    fn xml_elements_and_attributes() {
        let mut f = flow(
            "",
            r#"<?xml version="1.0"?><req v="2"><imei>356938035643809</imei><empty/></req>"#,
            Some("text/xml"),
        );
        assert_eq!(
            pairs(&mut f),
            vec![("v".into(), "2".into()), ("imei".into(), "356938035643809".into())]
        );
        assert_spans(&f);
    }

    #[test]
    fn broken_json_falls_back() {
        let mut f = flow("", "{\"a\": ", Some("application/json"));
        let p = pairs(&mut f);
        assert!(p.iter().all(|(k, _)| k.is_empty() || k == "{\"a\""), "{p:?}");
        assert_spans(&f);
    }

    #[test]
    fn form_body_and_bare_pieces() {
        let mut f = flow("x&=3", "a=1&b=", None);
        let p = pairs(&mut f);
        assert_eq!(
            p,
            vec![
                ("".into(), "x".into()),
                ("".into(), "=3".into()),
                ("a".into(), "1".into()),
                ("b".into(), "".into())
            ]
        );
        assert_spans(&f);
    }
}
