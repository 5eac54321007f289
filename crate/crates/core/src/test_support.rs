//! Builders shared by unit tests.

use crate::flow::{Example, Flow, Leak, Os, PiiType};
use crate::tokenize::Tokenizer;

pub(crate) fn flow(id: &str, query: &str, body: &str) -> Flow {
    let ctype = if body.trim_start().starts_with('{') {
        Some("application/json")
    } else if body.is_empty() {
        None
    } else {
        Some("application/x-www-form-urlencoded")
    };
    Flow::new(id, Os::Android, Some("ads.example.com"), "POST", "/track")
        .with_query(query)
        .with_header("Host", "ads.example.com")
        .with_body(body, ctype)
}

pub(crate) fn example(tok: &Tokenizer, query: &str, body: &str, leaks: &[(PiiType, &str)]) -> Example {
    example_with_id(tok, "t", query, body, leaks)
}

pub(crate) fn example_with_id(
    tok: &Tokenizer,
    id: &str,
    query: &str,
    body: &str,
    leaks: &[(PiiType, &str)],
) -> Example {
    Example {
        flow: tok.analyze(flow(id, query, body)),
        leaks: leaks.iter().map(|(pii, v)| Leak { pii: *pii, value: v.to_string() }).collect(),
    }
}
