//! Replaces ground-truth PII values with random values of the same shape so
//! that values never become features.

use rand::Rng;

use crate::decode::percent_encode;
use crate::flow::{Example, Leak};
use crate::tokenize::Tokenizer;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum CharClass {
    Digits,
    Hex { upper: bool },
    Alphanumeric,
}

fn classify(value: &str) -> CharClass {
    let alnum: Vec<char> = value.chars().filter(char::is_ascii_alphanumeric).collect();
    if alnum.iter().all(char::is_ascii_digit) {
        CharClass::Digits
    } else if alnum.iter().all(char::is_ascii_hexdigit) {
        CharClass::Hex { upper: alnum.iter().any(char::is_ascii_uppercase) }
    } else {
        CharClass::Alphanumeric
    }
}

const DIGITS: &[u8] = b"0123456789";
const HEX_LOWER: &[u8] = b"0123456789abcdef";
const HEX_UPPER: &[u8] = b"0123456789ABCDEF";
const ALNUM: &[u8] = b"0123456789abcdefghijklmnopqrstuvwxyzABCDEFGHIJKLMNOPQRSTUVWXYZ";

/// A random string with the same length as `value`; ASCII alphanumeric
/// positions are redrawn from the value's character class, everything else
/// is kept.
pub fn randomize_value<R: Rng + ?Sized>(value: &str, rng: &mut R) -> String {
    let alphabet = match classify(value) {
        CharClass::Digits => DIGITS,
        CharClass::Hex { upper: false } => HEX_LOWER,
        CharClass::Hex { upper: true } => HEX_UPPER,
        CharClass::Alphanumeric => ALNUM,
    };
    value
        .chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() {
                alphabet[rng.random_range(0..alphabet.len())] as char
            } else {
                c
            }
        })
        .collect()
}

/// Replaces the occurrences of `from` not glued to a neighboring ASCII
/// letter or digit, so a short value never rewrites part of a longer word.
fn replace_all(haystack: &mut String, from: &str, to: &str) -> bool {
    if from.is_empty() {
        return false;
    }
    let glued = |c: Option<char>| c.is_some_and(|c| c.is_ascii_alphanumeric());
    let mut out = String::with_capacity(haystack.len());
    let mut last = 0;
    for (i, _) in haystack.match_indices(from) {
        let end = i + from.len();
        if i < last || glued(haystack[..i].chars().next_back()) || glued(haystack[end..].chars().next()) {
            continue;
        }
        out.push_str(&haystack[last..i]);
        out.push_str(to);
        last = end;
    }
    if last == 0 {
        return false;
    }
    out.push_str(&haystack[last..]);
    *haystack = out;
    true
}

/// Randomizes every leaked value of `ex` wherever it occurs in the flow and
/// returns the re-analyzed example with updated truths.
pub fn randomize_example<R: Rng + ?Sized>(ex: &Example, tokenizer: &Tokenizer, rng: &mut R) -> Example {
    if ex.leaks.is_empty() {
        return ex.clone();
    }
    let mut flow = ex.flow.flow.clone();
    let identity_body = flow.content_encoding.as_deref().is_none_or(|e| e.trim().is_empty() || e.eq_ignore_ascii_case("identity"));
    let mut leaks: Vec<Leak> = Vec::with_capacity(ex.leaks.len());
    let mut done: Vec<(String, String)> = Vec::new();
    for leak in &ex.leaks {
        if let Some((_, new)) = done.iter().find(|(old, _)| *old == leak.value) {
            leaks.push(Leak { pii: leak.pii, value: new.clone() });
            continue;
        }
        let new = randomize_value(&leak.value, rng);
        let enc_old = percent_encode(&leak.value);
        let enc_new = percent_encode(&new);
        let mut found = false;
        for field in [&mut flow.path, &mut flow.query, &mut flow.decoded_query, &mut flow.decoded_text] {
            found |= replace_all(field, &leak.value, &new);
            if enc_old != leak.value {
                found |= replace_all(field, &enc_old, &enc_new);
            }
        }
        for (_, v) in flow.headers.iter_mut() {
            found |= replace_all(v, &leak.value, &new);
        }
        if identity_body {
            match String::from_utf8(std::mem::take(&mut flow.body)) {
                Ok(mut body) => {
                    replace_all(&mut body, &leak.value, &new);
                    if enc_old != leak.value {
                        replace_all(&mut body, &enc_old, &enc_new);
                    }
                    flow.body = body.into_bytes();
                }
                // binary body: the decoded text carries the replacement
                Err(e) => flow.body = e.into_bytes(),
            }
        }
        if found {
            leaks.push(Leak { pii: leak.pii, value: new.clone() });
            done.push((leak.value.clone(), new));
        } else {
            log::warn!("flow {}: leaked {} value not found, left as is", flow.id, leak.pii);
            leaks.push(leak.clone());
        }
    }
    Example { flow: tokenizer.reanalyze(flow), leaks }
}

/// [`randomize_example`] over a corpus.
pub fn randomize_pii_values<R: Rng + ?Sized>(examples: &[Example], tokenizer: &Tokenizer, rng: &mut R) -> Vec<Example> {
    examples.iter().map(|ex| randomize_example(ex, tokenizer, rng)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow::PiiType;
    use crate::test_support::example;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn leaves_longer_words_alone() {
        let mut s = "email=l&nick=l&x=al".to_string();
        assert!(replace_all(&mut s, "l", "q"));
        assert_eq!(s, "email=q&nick=q&x=al");
        let mut s = "sample".to_string();
        assert!(!replace_all(&mut s, "amp", "xyz"));
        assert_eq!(s, "sample");
    }

    #[test]
    fn keeps_length_and_class() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let v = randomize_value("ABCDEF", &mut rng);
        assert_eq!(v.len(), 6);
        assert!(v.chars().all(|c| c.is_ascii_hexdigit() && !c.is_ascii_lowercase()));
        let v = randomize_value("356938035643809", &mut rng);
        assert!(v.len() == 15 && v.chars().all(|c| c.is_ascii_digit()));
    }

    #[test]
    fn punctuation_positions_are_fixed() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..50 {
            let v = randomize_value("42.33", &mut rng);
            let shape: String = v.chars().map(|c| if c.is_ascii_digit() { 'd' } else { c }).collect();
            assert_eq!(shape, "dd.dd");
        }
        let v = randomize_value("a.b@mail.com", &mut rng);
        assert_eq!(v.find('@'), Some(3));
    }

    #[test]
    fn replaces_every_occurrence() {
        let tok = Tokenizer::default();
        let ex = example(&tok, "idfa=ABCDEF&echo=ABCDEF", "", &[(PiiType::AdvertiserId, "ABCDEF")]);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let out = randomize_example(&ex, &tok, &mut rng);
        let new = &out.leaks[0].value;
        assert_ne!(new, "ABCDEF");
        assert_eq!(out.flow.flow.query, format!("idfa={new}&echo={new}"));
        assert_eq!(out.flow.flow.kv_pairs[0].key, "idfa");
        assert!(!out.flow.tokens.words.contains("abcdef"));
    }

    #[test]
    fn no_truths_is_identity() {
        let tok = Tokenizer::default();
        let ex = example(&tok, "a=1", "", &[]);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        assert_eq!(randomize_example(&ex, &tok, &mut rng).flow, ex.flow);
    }

    #[test]
    fn missing_value_passes_through() {
        let tok = Tokenizer::default();
        let ex = example(&tok, "a=1", "", &[(PiiType::Imei, "356938035643809")]);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let out = randomize_example(&ex, &tok, &mut rng);
        assert_eq!(out.flow.flow.query, "a=1");
        assert_eq!(out.leaks, ex.leaks);
    }
}
