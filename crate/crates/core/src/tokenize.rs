//! Bag-of-words tokenization of flows.
//!
//! HTTP payloads have no standard token separator, so splitting uses a fixed
//! set of hard delimiters plus contextual handling of `:`, which separates
//! keys from values in JSON and header-like text but also appears inside MAC
//! addresses and times of day.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::decode::decode_body;
use crate::error::{Error, Result};
use crate::flow::{extract_kv_pairs, Flow, Span};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct TokenizerConfig {
    /// Characters that always split. Whitespace always splits as well.
    pub hard_delimiters: String,
    /// Characters that split unless they sit inside a MAC address or a time.
    pub ambiguous_delimiters: String,
    /// Multi-character separators such as `=>`.
    pub compound_separators: Vec<String>,
    pub lowercase: bool,
}

impl Default for TokenizerConfig {
    fn default() -> Self {
        TokenizerConfig {
            hard_delimiters: ",;/(){}[]&?=\"'<> \t\r\n".to_string(),
            ambiguous_delimiters: ":".to_string(),
            compound_separators: vec!["=>".to_string()],
            lowercase: true,
        }
    }
}

/// One word occurrence; `span` indexes [`TokenizedFlow::text`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Token {
    pub word: String,
    pub span: Span,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenizedFlow {
    pub flow_id: String,
    /// Request line, headers, then [`Flow::kv_text`].
    pub text: String,
    /// Where [`Flow::kv_text`] starts inside `text`.
    pub kv_offset: usize,
    /// Tokens in text order.
    pub tokens: Vec<Token>,
    pub words: BTreeSet<String>,
    pub word_positions: BTreeMap<String, Vec<Span>>,
}

/// A flow that has been decoded, split into key/value pairs and tokenized.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnalyzedFlow {
    pub flow: Flow,
    pub tokens: TokenizedFlow,
}

/// Compiled [`TokenizerConfig`].
#[derive(Debug, Clone)]
pub struct Tokenizer {
    config: TokenizerConfig,
    hard: BTreeSet<char>,
    ambiguous: BTreeSet<char>,
}

impl Default for Tokenizer {
    fn default() -> Self {
        Tokenizer::new(TokenizerConfig::default()).expect("default tokenizer config is valid")
    }
}

impl Tokenizer {
    pub fn new(config: TokenizerConfig) -> Result<Self> {
        let hard: BTreeSet<char> = config.hard_delimiters.chars().collect();
        let ambiguous: BTreeSet<char> = config.ambiguous_delimiters.chars().collect();
        if let Some(c) = ambiguous.iter().find(|c| hard.contains(c) || c.is_whitespace()) {
            return Err(Error::Config(format!("delimiter {c:?} is both hard and ambiguous")));
        }
        if config.compound_separators.iter().any(String::is_empty) {
            return Err(Error::Config("compound separators must be non-empty".into()));
        }
        Ok(Tokenizer { config, hard, ambiguous })
    }

    pub fn config(&self) -> &TokenizerConfig {
        &self.config
    }

    fn is_hard(&self, c: char) -> bool {
        c.is_whitespace() || self.hard.contains(&c)
    }

    /// Splits `text` into word occurrences.
    pub fn tokenize_text(&self, text: &str) -> Vec<Token> {
        let mut tokens = Vec::new();
        let mut start: Option<usize> = None;
        let mut iter = text.char_indices().peekable();
        while let Some((i, c)) = iter.next() {
            let compound = self
                .config
                .compound_separators
                .iter()
                .find(|sep| text[i..].starts_with(sep.as_str()))
                .map(|sep| sep.len());
            if compound.is_some() || self.is_hard(c) {
                if let Some(s) = start.take() {
                    self.emit_raw(text, s, i, &mut tokens);
                }
                if let Some(len) = compound {
                    // skip the rest of the separator
                    while iter.peek().is_some_and(|(j, _)| *j < i + len) {
                        iter.next();
                    }
                }
            } else if start.is_none() {
                start = Some(i);
            }
        }
        if let Some(s) = start {
            self.emit_raw(text, s, text.len(), &mut tokens);
        }
        tokens
    }

    /// Emits the pieces of a hard-delimited run, resolving ambiguous delimiters.
    fn emit_raw(&self, text: &str, start: usize, end: usize, out: &mut Vec<Token>) {
        let raw = &text[start..end];
        if !raw.chars().any(|c| self.ambiguous.contains(&c)) {
            self.push(text, start, end, out);
            return;
        }
        // split on ambiguous delimiters, then re-join MAC and time runs
        let mut parts: Vec<(usize, usize)> = Vec::new();
        let mut s = start;
        for (i, c) in raw.char_indices() {
            if self.ambiguous.contains(&c) {
                parts.push((s, start + i));
                s = start + i + c.len_utf8();
            }
        }
        parts.push((s, end));
        let seps_are_colons = self.ambiguous.contains(&':');
        let mut j = 0;
        while j < parts.len() {
            let joined = if seps_are_colons { protected_run(text, &parts[j..]) } else { 1 };
            let (s, _) = parts[j];
            let (_, e) = parts[j + joined - 1];
            self.push(text, s, e, out);
            j += joined;
        }
    }

    fn push(&self, text: &str, start: usize, end: usize, out: &mut Vec<Token>) {
        if start >= end {
            return;
        }
        let raw = &text[start..end];
        let word = if self.config.lowercase { raw.to_lowercase() } else { raw.to_string() };
        out.push(Token { word, span: Span::from_bounds(start, end) });
    }

    /// Tokenizes request line, headers, query and decoded body.
    pub fn tokenize(&self, flow: &Flow) -> TokenizedFlow {
        let mut text = String::with_capacity(256 + flow.decoded_query.len() + flow.decoded_text.len());
        text.push_str(&flow.method);
        text.push(' ');
        text.push_str(&flow.path);
        text.push('\n');
        for (k, v) in &flow.headers {
            text.push_str(k);
            text.push_str(": ");
            text.push_str(v);
            text.push('\n');
        }
        text.push('\n');
        let kv_offset = text.len();
        text.push_str(&flow.decoded_query);
        text.push('\n');
        text.push_str(&flow.decoded_text);

        let tokens = self.tokenize_text(&text);
        let mut word_positions: BTreeMap<String, Vec<Span>> = BTreeMap::new();
        for t in &tokens {
            word_positions.entry(t.word.clone()).or_default().push(t.span);
        }
        let words = word_positions.keys().cloned().collect();
        TokenizedFlow { flow_id: flow.id.clone(), text, kv_offset, tokens, words, word_positions }
    }

    /// Decodes, extracts key/value pairs and tokenizes.
    pub fn analyze(&self, mut flow: Flow) -> AnalyzedFlow {
        decode_body(&mut flow);
        extract_kv_pairs(&mut flow);
        let tokens = self.tokenize(&flow);
        AnalyzedFlow { flow, tokens }
    }

    /// Re-extracts pairs and re-tokenizes after the decoded text was edited in place.
    pub fn reanalyze(&self, mut flow: Flow) -> AnalyzedFlow {
        extract_kv_pairs(&mut flow);
        let tokens = self.tokenize(&flow);
        AnalyzedFlow { flow, tokens }
    }
}

/// Free-function form of [`Tokenizer::tokenize`].
pub fn tokenize(flow: &Flow, cfg: &TokenizerConfig) -> Result<TokenizedFlow> {
    Ok(Tokenizer::new(cfg.clone())?.tokenize(flow))
}

fn is_hex_pair(s: &str) -> bool {
    s.len() == 2 && s.bytes().all(|b| b.is_ascii_hexdigit())
}

fn is_digits(s: &str, min: usize, max: usize) -> bool {
    (min..=max).contains(&s.len()) && s.bytes().all(|b| b.is_ascii_digit())
}

/// Number of colon-separated parts starting at `parts[0]` that form a MAC
/// address (six hex octets) or a time (`d:dd` / `dd:dd` / `dd:dd:dd`); 1 otherwise.
fn protected_run(text: &str, parts: &[(usize, usize)]) -> usize {
    let part = |i: usize| &text[parts[i].0..parts[i].1];
    if parts.len() >= 6 && (0..6).all(|i| is_hex_pair(part(i))) {
        return 6;
    }
    if parts.len() >= 2 && is_digits(part(0), 1, 2) && is_digits(part(1), 2, 2) {
        if parts.len() >= 3 && is_digits(part(2), 2, 2) {
            return 3;
        }
        return 2;
    }
    1
}

#[cfg(test)]
mod tests {
    use super::*;

    fn words(text: &str) -> Vec<String> {
        Tokenizer::default().tokenize_text(text).into_iter().map(|t| t.word).collect()
    }

    #[test]
    fn mac_address_is_one_word() {
        assert_eq!(words("02:00:00:00:00:00"), vec!["02:00:00:00:00:00"]);
        assert_eq!(words("mac:02:00:00:00:00:0A"), vec!["mac", "02:00:00:00:00:0a"]);
    }

    #[test]
    fn time_of_day_is_one_word() {
        assert_eq!(words("at 11:59"), vec!["at", "11:59"]);
        assert_eq!(words("t=09:30:15"), vec!["t", "09:30:15"]);
    }

    #[test]
    fn json_colon_splits() {
        assert_eq!(words(r#"{"username":"user007"}"#), vec!["username", "user007"]);
        assert_eq!(words("username:user007"), vec!["username", "user007"]);
    }

    #[test]
    fn hard_delimiters() {
        assert_eq!(words("a=1&b=2"), vec!["a", "1", "b", "2"]);
        assert_eq!(words("x,y;z/(w){v}[u]"), vec!["x", "y", "z", "w", "v", "u"]);
    }

    #[test]
    fn arrow_separator() {
        assert_eq!(words("username => user007"), vec!["username", "user007"]);
        let t = Tokenizer::new(TokenizerConfig {
            hard_delimiters: " ".into(),
            ..TokenizerConfig::default()
        })
        .unwrap();
        let w: Vec<_> = t.tokenize_text("username=>user007").into_iter().map(|t| t.word).collect();
        assert_eq!(w, vec!["username", "user007"]);
    }

    #[test]
    fn lowercases_but_spans_keep_case() {
        let text = "Content-Length: 12";
        let toks = Tokenizer::default().tokenize_text(text);
        assert_eq!(toks[0].word, "content-length");
        assert_eq!(toks[0].span.slice(text), "Content-Length");
    }

    #[test]
    fn overlapping_sets_are_rejected() {
        let cfg = TokenizerConfig { ambiguous_delimiters: "=".into(), ..TokenizerConfig::default() };
        assert!(Tokenizer::new(cfg).is_err());
    }
}
