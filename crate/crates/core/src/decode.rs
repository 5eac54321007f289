//! Payload decoding: content-encoding inflation, percent-decoding and UTF-8
//! interpretation.
//!
//! Every decoder here also produces an offset map from decoded bytes back to
//! source bytes so that spans found in decoded text can be rewritten in the
//! original payload.

use std::io::Read;

use flate2::read::{GzDecoder, ZlibDecoder};

use crate::flow::Flow;

/// Decoded text plus a map back into `source`.
///
/// `map[i]` is the offset in `source` of the unit that produced decoded byte
/// `i`; `map[text.len()] == source.len()`.
#[derive(Debug, Clone)]
pub struct Decoded {
    pub text: String,
    pub map: Vec<usize>,
    /// The bytes `map` indexes into: the inflated body, or the raw body when
    /// no inflation happened.
    pub source: Vec<u8>,
    pub inflated: bool,
    pub degraded: bool,
    pub urlencoded: bool,
}

impl Decoded {
    /// Source byte range for a decoded range whose ends lie on unit boundaries.
    pub fn source_range(&self, start: usize, end: usize) -> (usize, usize) {
        (self.map[start], self.map[end])
    }
}

fn is_urlencoded(content_type: Option<&str>) -> bool {
    content_type
        .map(|c| c.to_ascii_lowercase().contains("x-www-form-urlencoded"))
        .unwrap_or(false)
}

fn inflate(body: &[u8], encoding: &str) -> Option<Vec<u8>> {
    let mut out = Vec::new();
    let ok = match encoding {
        "gzip" | "x-gzip" => GzDecoder::new(body).read_to_end(&mut out).is_ok(),
        "deflate" => ZlibDecoder::new(body).read_to_end(&mut out).is_ok(),
        _ => return Some(body.to_vec()),
    };
    ok.then_some(out)
}

/// Percent-decodes `raw`; `+` becomes a space when `plus_as_space`.
pub fn percent_decode_mapped(raw: &[u8], plus_as_space: bool) -> (Vec<u8>, Vec<usize>) {
    let mut out = Vec::with_capacity(raw.len());
    let mut map = Vec::with_capacity(raw.len() + 1);
    let mut i = 0;
    while i < raw.len() {
        let b = raw[i];
        map.push(i);
        if b == b'%' && i + 2 < raw.len() && hex(raw[i + 1]).is_some() && hex(raw[i + 2]).is_some() {
            out.push(hex(raw[i + 1]).unwrap() << 4 | hex(raw[i + 2]).unwrap());
            i += 3;
        } else {
            out.push(if plus_as_space && b == b'+' { b' ' } else { b });
            i += 1;
        }
    }
    map.push(raw.len());
    (out, map)
}

fn hex(b: u8) -> Option<u8> {
    (b as char).to_digit(16).map(|d| d as u8)
}

/// UTF-8 interpretation with U+FFFD for invalid sequences, composing `map`.
fn utf8_lossy_mapped(bytes: &[u8], map: &[usize]) -> (String, Vec<usize>) {
    let mut text = String::with_capacity(bytes.len());
    let mut out_map = Vec::with_capacity(bytes.len() + 1);
    let mut offset = 0;
    for chunk in bytes.utf8_chunks() {
        let valid = chunk.valid();
        text.push_str(valid);
        out_map.extend((0..valid.len()).map(|i| map[offset + i]));
        offset += valid.len();
        let invalid = chunk.invalid();
        if !invalid.is_empty() {
            text.push(char::REPLACEMENT_CHARACTER);
            out_map.extend(std::iter::repeat_n(map[offset], 3));
            offset += invalid.len();
        }
    }
    out_map.push(map[bytes.len()]);
    (text, out_map)
}

fn latin1_mapped(bytes: &[u8]) -> (String, Vec<usize>) {
    let mut text = String::with_capacity(bytes.len());
    let mut map = Vec::with_capacity(bytes.len() + 1);
    for (i, &b) in bytes.iter().enumerate() {
        let c = b as char;
        text.push(c);
        map.extend(std::iter::repeat_n(i, c.len_utf8()));
    }
    map.push(bytes.len());
    (text, map)
}

/// Decodes a query string: percent-decoding, then UTF-8.
pub fn decode_query_mapped(query: &str) -> Decoded {
    let (bytes, pmap) = percent_decode_mapped(query.as_bytes(), true);
    let (text, map) = utf8_lossy_mapped(&bytes, &pmap);
    Decoded {
        text,
        map,
        source: query.as_bytes().to_vec(),
        inflated: false,
        degraded: false,
        urlencoded: true,
    }
}

/// Decodes a body: inflate (gzip/deflate), percent-decode when form-encoded,
/// then UTF-8. A corrupt compressed body falls back to latin-1 over the raw
/// bytes and is flagged degraded.
pub fn decode_body_mapped(flow: &Flow) -> Decoded {
    let encoding = flow
        .content_encoding
        .as_deref()
        .map(|e| e.trim().to_ascii_lowercase())
        .unwrap_or_default();
    let urlencoded = is_urlencoded(flow.content_type.as_deref());
    match inflate(&flow.body, &encoding) {
        Some(bytes) => {
            let inflated = !encoding.is_empty() && matches!(encoding.as_str(), "gzip" | "x-gzip" | "deflate");
            let (text, map) = if urlencoded {
                let (pbytes, pmap) = percent_decode_mapped(&bytes, true);
                utf8_lossy_mapped(&pbytes, &pmap)
            } else {
                let identity: Vec<usize> = (0..=bytes.len()).collect();
                utf8_lossy_mapped(&bytes, &identity)
            };
            Decoded { text, map, source: bytes, inflated, degraded: false, urlencoded }
        }
        None => {
            log::warn!("flow {}: corrupt {encoding} body, decoding as latin-1", flow.id);
            let (text, map) = latin1_mapped(&flow.body);
            Decoded { text, map, source: flow.body.clone(), inflated: false, degraded: true, urlencoded: false }
        }
    }
}

/// Fills `flow.decoded_query`, `flow.decoded_text` and `flow.decode_degraded`;
/// returns the decoded body text.
pub fn decode_body(flow: &mut Flow) -> String {
    let body = decode_body_mapped(flow);
    flow.decoded_query = decode_query_mapped(&flow.query).text;
    flow.decoded_text = body.text.clone();
    flow.decode_degraded = body.degraded;
    body.text
}

/// Percent-encodes everything outside the unreserved set.
pub fn percent_encode(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for b in s.bytes() {
        if b.is_ascii_alphanumeric() || matches!(b, b'-' | b'_' | b'.' | b'~') {
            out.push(b as char);
        } else {
            out.push_str(&format!("%{b:02X}"));
        }
    }
    out
}
