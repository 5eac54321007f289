//! Duplication of positive flows whose leak-adjacent words are too rare to
//! survive the frequency filter.

use std::collections::{BTreeMap, BTreeSet};

use rand::Rng;

use super::randomize::randomize_example;
use crate::flow::{Example, Span};
use crate::tokenize::Tokenizer;

/// Words next to a leaked value: words of the same key/value pair (other than
/// the value itself) and the tokens immediately before and after each value
/// occurrence.
pub fn adjacent_words(ex: &Example) -> BTreeSet<String> {
    let mut out = BTreeSet::new();
    if ex.leaks.is_empty() {
        return out;
    }
    let tf = &ex.flow.tokens;
    let text = &tf.text;
    let mut value_ranges: Vec<Span> = Vec::new();
    for leak in &ex.leaks {
        if leak.value.is_empty() {
            continue;
        }
        let mut from = 0;
        while let Some(p) = text[from..].find(&leak.value) {
            let start = from + p;
            value_ranges.push(Span::new(start, leak.value.len()));
            from = start + leak.value.len();
        }
    }
    let kv_offset = tf.kv_offset;
    for pair in &ex.flow.flow.kv_pairs {
        if pair.key.is_empty() || !ex.leaks.iter().any(|l| !l.value.is_empty() && pair.value.contains(&l.value)) {
            continue;
        }
        let pair_span = Span::new(pair.pair_span.start + kv_offset, pair.pair_span.len);
        let value_span = Span::new(pair.value_span.start + kv_offset, pair.value_span.len);
        for t in &tf.tokens {
            let inside = t.span.start >= pair_span.start && t.span.end() <= pair_span.end();
            if inside && !t.span.overlaps(&value_span) {
                out.insert(t.word.clone());
            }
        }
    }
    for (i, t) in tf.tokens.iter().enumerate() {
        if !value_ranges.iter().any(|r| r.overlaps(&t.span)) {
            continue;
        }
        let neighbours = [i.checked_sub(1), Some(i + 1)];
        for j in neighbours.into_iter().flatten() {
            if let Some(n) = tf.tokens.get(j) {
                if !value_ranges.iter().any(|r| r.overlaps(&n.span)) {
                    out.insert(n.word.clone());
                }
            }
        }
    }
    out
}

/// Document frequency of every word.
pub fn document_frequencies(examples: &[Example]) -> BTreeMap<String, usize> {
    let mut df: BTreeMap<String, usize> = BTreeMap::new();
    for ex in examples {
        for w in &ex.flow.tokens.words {
            *df.entry(w.clone()).or_default() += 1;
        }
    }
    df
}

/// Appends re-randomized copies of positive flows until every leak-adjacent
/// word occurs in more than `min_word_frequency` flows. Copies get ids
/// `{id}~os{n}`. Negative flows are never copied.
pub fn oversample_rare_leaks<R: Rng + ?Sized>(
    examples: &[Example],
    min_word_frequency: usize,
    tokenizer: &Tokenizer,
    rng: &mut R,
) -> Vec<Example> {
    let mut out = examples.to_vec();
    let mut df = document_frequencies(examples);
    let mut owners: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    for (i, ex) in examples.iter().enumerate().filter(|(_, e)| e.is_positive()) {
        for w in adjacent_words(ex) {
            owners.entry(w).or_default().push(i);
        }
    }
    let mut copies: BTreeMap<usize, usize> = BTreeMap::new();
    for (word, idx) in &owners {
        let mut turn = 0;
        while df.get(word).copied().unwrap_or(0) <= min_word_frequency {
            let src = idx[turn % idx.len()];
            turn += 1;
            let n = copies.entry(src).or_default();
            *n += 1;
            let mut dup = randomize_example(&examples[src], tokenizer, rng);
            let id = format!("{}~os{}", examples[src].id(), n);
            dup.flow.flow.id = id.clone();
            dup.flow.tokens.flow_id = id;
            if !dup.flow.tokens.words.contains(word) {
                // the word was part of the randomized value; copying cannot help
                log::warn!("word `{word}` does not survive randomization, skipping oversampling");
                break;
            }
            for w in &dup.flow.tokens.words {
                *df.entry(w.clone()).or_default() += 1;
            }
            out.push(dup);
        }
    }
    out
}
