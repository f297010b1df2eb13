//! The one tokenizer shared by retrieval, tracking, detection and metrics.
//!
//! Rules, applied to the lowercased text:
//! - a maximal run of alphanumeric characters is a word;
//! - an apostrophe directly followed by a short clitic (`s`, `t`, `d`, `m`,
//!   `re`, `ve`, `ll`) that ends at a non-letter becomes one token (`'s`);
//! - every other non-whitespace character is a token of its own.
//!
//! Curly apostrophes are folded to `'`. Stopwords are kept.

const CLITICS: &[&str] = &["s", "t", "d", "m", "re", "ve", "ll"];

fn is_apostrophe(c: char) -> bool {
    matches!(c, '\'' | '\u{2019}' | '\u{2018}')
}

pub fn tokenize(text: &str) -> Vec<String> {
    let chars: Vec<char> = text.chars().flat_map(char::to_lowercase).collect();
    let mut tokens = Vec::new();
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        if c.is_whitespace() {
            i += 1;
        } else if c.is_alphanumeric() {
            let start = i;
            while i < chars.len() && chars[i].is_alphanumeric() {
                i += 1;
            }
            tokens.push(chars[start..i].iter().collect());
        } else if is_apostrophe(c) {
            let start = i + 1;
            let mut end = start;
            while end < chars.len() && chars[end].is_alphabetic() {
                end += 1;
            }
            let tail: String = chars[start..end].iter().collect();
            let at_boundary = end == chars.len() || !chars[end].is_alphanumeric();
            if end > start && at_boundary && CLITICS.contains(&tail.as_str()) {
                tokens.push(format!("'{tail}"));
                i = end;
            } else {
                tokens.push("'".to_string());
                i += 1;
            }
        } else {
            tokens.push(c.to_string());
            i += 1;
        }
    }
    tokens
}
