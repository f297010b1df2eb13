//! TF-IDF and BM25 against a direct, unoptimized transcription of the formulas.

use std::collections::HashMap;

use proptest::prelude::*;
use sktod_core::corpus::{tokenize, Domain, KnowledgeBase};
use sktod_core::select::LexicalIndex;

fn build(docs: &[String]) -> KnowledgeBase {
    let mut b = KnowledgeBase::builder();
    b.entity(Domain::Hotel, "0", "H").unwrap();
    b.review("0", docs.iter().enumerate().map(|(i, d)| (i.to_string(), d.clone())))
        .unwrap();
    b.build()
}

fn counts(tokens: &[String]) -> HashMap<&str, f64> {
    let mut m = HashMap::new();
    for t in tokens {
        *m.entry(t.as_str()).or_insert(0.0) += 1.0;
    }
    m
}

fn df(docs: &[Vec<String>], term: &str) -> f64 {
    docs.iter().filter(|d| d.iter().any(|t| t == term)).count() as f64
}

fn tfidf_oracle(docs: &[Vec<String>], query: &[String], doc: &[String]) -> f64 {
    let n = docs.len() as f64;
    let idf = |t: &str| ((n + 1.0) / (df(docs, t) + 1.0)).ln() + 1.0;
    // Query terms outside the collection vocabulary carry no weight.
    let q: HashMap<&str, f64> = counts(query)
        .into_iter()
        .filter(|(t, _)| df(docs, t) > 0.0)
        .map(|(t, c)| (t, c * idf(t)))
        .collect();
    let d: HashMap<&str, f64> = counts(doc).into_iter().map(|(t, c)| (t, c * idf(t))).collect();
    let dot: f64 = q.iter().map(|(t, w)| w * d.get(t).unwrap_or(&0.0)).sum();
    let qn = q.values().map(|w| w * w).sum::<f64>().sqrt();
    let dn = d.values().map(|w| w * w).sum::<f64>().sqrt();
    if qn == 0.0 || dn == 0.0 {
        0.0
    } else {
        dot / (qn * dn)
    }
}

fn bm25_oracle(docs: &[Vec<String>], query: &[String], doc: &[String]) -> f64 {
    let n = docs.len() as f64;
    let avg = docs.iter().map(Vec::len).sum::<usize>() as f64 / n;
    let tf = counts(doc);
    query
        .iter()
        .map(|t| {
            let f = *tf.get(t.as_str()).unwrap_or(&0.0);
            let df = df(docs, t);
            let idf = (1.0 + (n - df + 0.5) / (df + 0.5)).ln();
            idf * f * 2.2 / (f + 1.2 * (0.25 + 0.75 * doc.len() as f64 / avg))
        })
        .sum()
}

const WORDS: &[&str] = &["the", "wifi", "room", "was", "slow", "great", "water", "pressure", "not", "clean"];

fn sentence() -> impl Strategy<Value = String> {
    prop::collection::vec(prop::sample::select(WORDS), 1..8).prop_map(|w| w.join(" "))
}

proptest! {
    #[test]
    fn scores_match_oracle(docs in prop::collection::vec(sentence(), 1..8), query in sentence()) {
        let kb = build(&docs);
        let index = LexicalIndex::build(&kb);
        let toks: Vec<Vec<String>> = docs.iter().map(|d| tokenize(d)).collect();
        let q = tokenize(&format!("{query} zzz"));
        for (s, d) in kb.snippets().iter().zip(&toks) {
            let got = index.tfidf(&format!("{query} zzz"), s);
            let want = tfidf_oracle(&toks, &q, d);
            prop_assert!((got - want).abs() < 1e-9, "tfidf {got} vs {want}");
            let got = index.bm25(&format!("{query} zzz"), s);
            let want = bm25_oracle(&toks, &q, d);
            prop_assert!((got - want).abs() < 1e-9, "bm25 {got} vs {want}");
        }
    }
}

#[test]
fn identical_text_has_unit_cosine() {
    let docs = vec!["the wifi was slow".to_string(), "great room".to_string()];
    let kb = build(&docs);
    let index = LexicalIndex::build(&kb);
    let s = &kb.snippets()[0];
    assert!((index.tfidf("the wifi was slow", s) - 1.0).abs() < 1e-12);
    assert!(index.tfidf("the room", s) < 1.0);
}
