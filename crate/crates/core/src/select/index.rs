use std::collections::HashMap;

use crate::corpus::{tokenize, KnowledgeBase, KnowledgeSnippet, SnippetRef};

pub const BM25_K1: f64 = 1.2;
pub const BM25_B: f64 = 0.75;

#[derive(Debug, Clone, PartialEq)]
struct DocVector {
    /// (term id, count), sorted by term id.
    terms: Vec<(u32, u32)>,
    len: u32,
    tfidf_norm: f64,
}

/// Inverted statistics over every review sentence of a knowledge base.
/// Rebuilding from the same knowledge base yields an identical index.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct LexicalIndex {
    vocab: HashMap<String, u32>,
    doc_freq: Vec<u32>,
    docs: Vec<DocVector>,
    positions: HashMap<SnippetRef, usize>,
    n_docs: usize,
    avg_len: f64,
}

impl LexicalIndex {
    pub fn build(kb: &KnowledgeBase) -> Self {
        let mut vocab: HashMap<String, u32> = HashMap::new();
        let mut doc_freq: Vec<u32> = Vec::new();
        let mut raw: Vec<(Vec<(u32, u32)>, u32)> = Vec::with_capacity(kb.snippet_count());
        for s in kb.snippets() {
            let tokens = tokenize(&s.text);
            let mut counts: HashMap<u32, u32> = HashMap::new();
            for t in &tokens {
                let next = vocab.len() as u32;
                let id = *vocab.entry(t.clone()).or_insert(next);
                if id as usize == doc_freq.len() {
                    doc_freq.push(0);
                }
                *counts.entry(id).or_insert(0) += 1;
            }
            for &id in counts.keys() {
                doc_freq[id as usize] += 1;
            }
            let mut terms: Vec<(u32, u32)> = counts.into_iter().collect();
            terms.sort_unstable();
            raw.push((terms, tokens.len() as u32));
        }
        let total_len: u64 = raw.iter().map(|(_, l)| *l as u64).sum();
        let mut index = LexicalIndex {
            vocab,
            doc_freq,
            docs: Vec::new(),
            n_docs: raw.len(),
            positions: kb
                .snippets()
                .iter()
                .enumerate()
                .map(|(i, s)| (s.snippet_ref.clone(), i))
                .collect(),
            avg_len: if raw.is_empty() {
                0.0
            } else {
                total_len as f64 / raw.len() as f64
            },
        };
        index.docs = raw
            .into_iter()
            .map(|(terms, len)| {
                let tfidf_norm = index.norm(&terms);
                DocVector {
                    terms,
                    len,
                    tfidf_norm,
                }
            })
            .collect();
        index
    }

    pub fn doc_count(&self) -> usize {
        self.n_docs
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab.len()
    }

    pub fn avg_doc_len(&self) -> f64 {
        self.avg_len
    }

    pub fn doc_freq(&self, term: &str) -> u32 {
        self.vocab
            .get(term)
            .map(|&id| self.doc_freq[id as usize])
            .unwrap_or(0)
    }

    /// Smoothed idf: `ln((N + 1) / (df + 1)) + 1`.
    pub fn tfidf_idf(&self, df: u32) -> f64 {
        ((self.n_docs as f64 + 1.0) / (df as f64 + 1.0)).ln() + 1.0
    }

    /// `ln(1 + (N − df + 0.5) / (df + 0.5))`.
    pub fn bm25_idf(&self, df: u32) -> f64 {
        let n = self.n_docs as f64;
        let df = df as f64;
        (1.0 + (n - df + 0.5) / (df + 0.5)).ln()
    }

    fn norm(&self, terms: &[(u32, u32)]) -> f64 {
        terms
            .iter()
            .map(|&(id, tf)| {
                let w = tf as f64 * self.tfidf_idf(self.doc_freq[id as usize]);
                w * w
            })
            .sum::<f64>()
            .sqrt()
    }

    /// Term counts of a text restricted to the index vocabulary.
    fn vectorize(&self, text: &str) -> (Vec<(u32, u32)>, u32) {
        let tokens = tokenize(text);
        let mut counts: HashMap<u32, u32> = HashMap::new();
        for t in &tokens {
            if let Some(&id) = self.vocab.get(t) {
                *counts.entry(id).or_insert(0) += 1;
            }
        }
        let mut terms: Vec<(u32, u32)> = counts.into_iter().collect();
        terms.sort_unstable();
        (terms, tokens.len() as u32)
    }

    fn doc(&self, snippet: &KnowledgeSnippet) -> DocVector {
        match self.positions.get(&snippet.snippet_ref) {
            Some(&i) => self.docs[i].clone(),
            None => {
                let (terms, len) = self.vectorize(&snippet.text);
                let tfidf_norm = self.norm(&terms);
                DocVector {
                    terms,
                    len,
                    tfidf_norm,
                }
            }
        }
    }

    /// Cosine similarity of tf·idf vectors; 0 when either side is empty.
    pub fn tfidf(&self, query: &str, snippet: &KnowledgeSnippet) -> f64 {
        let (q, _) = self.vectorize(query);
        let q_norm = self.norm(&q);
        let d = self.doc(snippet);
        if q_norm == 0.0 || d.tfidf_norm == 0.0 {
            return 0.0;
        }
        let mut dot = 0.0;
        let (mut i, mut j) = (0, 0);
        while i < q.len() && j < d.terms.len() {
            match q[i].0.cmp(&d.terms[j].0) {
                std::cmp::Ordering::Less => i += 1,
                std::cmp::Ordering::Greater => j += 1,
                std::cmp::Ordering::Equal => {
                    let idf = self.tfidf_idf(self.doc_freq[q[i].0 as usize]);
                    dot += (q[i].1 as f64 * idf) * (d.terms[j].1 as f64 * idf);
                    i += 1;
                    j += 1;
                }
            }
        }
        (dot / (q_norm * d.tfidf_norm)).min(1.0)
    }

    /// Okapi BM25 with `k1 = 1.2`, `b = 0.75`. Every query token counts,
    /// repeats included.
    pub fn bm25(&self, query: &str, snippet: &KnowledgeSnippet) -> f64 {
        if self.docs.is_empty() {
            return 0.0;
        }
        let d = self.doc(snippet);
        let tf_of = |id: u32| {
            d.terms
                .binary_search_by_key(&id, |&(t, _)| t)
                .map(|k| d.terms[k].1)
                .unwrap_or(0)
        };
        let length_norm = 1.0 - BM25_B + BM25_B * d.len as f64 / self.avg_len;
        tokenize(query)
            .iter()
            .filter_map(|t| self.vocab.get(t).copied())
            .map(|id| {
                let tf = tf_of(id) as f64;
                if tf == 0.0 {
                    return 0.0;
                }
                self.bm25_idf(self.doc_freq[id as usize]) * tf * (BM25_K1 + 1.0)
                    / (tf + BM25_K1 * length_norm)
            })
            .sum()
    }
}
