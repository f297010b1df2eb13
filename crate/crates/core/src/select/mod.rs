//! Knowledge selection: score every review sentence of the tracked entities
//! against the dialogue and keep those at or above a threshold.
//!
//! Selection is threshold-based, never top-K: an instance may select zero,
//! one or all of its candidates. Rankings break score ties by ascending
//! [`SnippetRef`], so every ordering here is total and reproducible.

mod calibrate;
mod index;
mod pairs;

use std::collections::{BTreeSet, HashSet};

use serde::{Deserialize, Serialize};

use crate::corpus::{DialogueContext, EntityKey, KnowledgeBase, KnowledgeSnippet, SnippetRef};
use crate::error::Result;

pub use calibrate::{calibrate_threshold, quantile_grid, Calibration, ScoredInstance, GRID_POINTS};
pub use index::{LexicalIndex, BM25_B, BM25_K1};
pub use pairs::{export_training_pairs, write_training_pairs, PairExport, TrainingPair};

/// Scores (context, snippet) pairs. Implementations must return one finite
/// score per candidate, in candidate order.
pub trait SnippetScorer: Sync {
    fn name(&self) -> &str;

    fn score_batch(&self, context: &DialogueContext, candidates: &[&KnowledgeSnippet]) -> Result<Vec<f64>>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LexicalKind {
    Tfidf,
    Bm25,
}

/// TF-IDF cosine or BM25 against the final user utterance.
#[derive(Debug, Clone, Copy)]
pub struct LexicalScorer<'a> {
    pub index: &'a LexicalIndex,
    pub kind: LexicalKind,
}

impl<'a> LexicalScorer<'a> {
    pub fn tfidf(index: &'a LexicalIndex) -> Self {
        LexicalScorer {
            index,
            kind: LexicalKind::Tfidf,
        }
    }

    pub fn bm25(index: &'a LexicalIndex) -> Self {
        LexicalScorer {
            index,
            kind: LexicalKind::Bm25,
        }
    }

    pub fn score(&self, context: &DialogueContext, snippet: &KnowledgeSnippet) -> f64 {
        match self.kind {
            LexicalKind::Tfidf => score_tfidf(self.index, context, snippet),
            LexicalKind::Bm25 => score_bm25(self.index, context, snippet),
        }
    }
}

impl SnippetScorer for LexicalScorer<'_> {
    fn name(&self) -> &str {
        match self.kind {
            LexicalKind::Tfidf => "tfidf",
            LexicalKind::Bm25 => "bm25",
        }
    }

    fn score_batch(&self, context: &DialogueContext, candidates: &[&KnowledgeSnippet]) -> Result<Vec<f64>> {
        Ok(candidates.iter().map(|s| self.score(context, s)).collect())
    }
}

pub fn score_tfidf(index: &LexicalIndex, context: &DialogueContext, snippet: &KnowledgeSnippet) -> f64 {
    index.tfidf(&context.last_user().text, snippet)
}

pub fn score_bm25(index: &LexicalIndex, context: &DialogueContext, snippet: &KnowledgeSnippet) -> f64 {
    index.bm25(&context.last_user().text, snippet)
}

/// All review sentences of the given entities, in entity order, without
/// duplicates.
#[derive(Debug, Clone)]
pub struct CandidateSet<'kb> {
    pub instance_id: String,
    pub candidates: Vec<&'kb KnowledgeSnippet>,
}

impl<'kb> CandidateSet<'kb> {
    pub fn for_entities(instance_id: impl Into<String>, kb: &'kb KnowledgeBase, entities: &[EntityKey]) -> Self {
        let mut seen = HashSet::new();
        let candidates = entities
            .iter()
            .filter(|e| seen.insert(*e))
            .flat_map(|e| kb.snippets_of(e))
            .collect();
        CandidateSet {
            instance_id: instance_id.into(),
            candidates,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.candidates.is_empty()
    }

    pub fn len(&self) -> usize {
        self.candidates.len()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredSnippet {
    #[serde(rename = "ref")]
    pub snippet_ref: SnippetRef,
    pub score: f64,
}

/// Descending score, then ascending ref.
pub fn rank(scored: &mut [ScoredSnippet]) {
    scored.sort_by(|a, b| {
        b.score
            .total_cmp(&a.score)
            .then_with(|| a.snippet_ref.cmp(&b.snippet_ref))
    });
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SnippetSelection {
    pub instance_id: String,
    /// Selected snippets in rank order.
    pub selected: Vec<ScoredSnippet>,
    pub threshold_used: f64,
}

impl SnippetSelection {
    /// A selection taken from labels; every score is 0 so order falls back
    /// to refs.
    pub fn from_refs(instance_id: impl Into<String>, refs: impl IntoIterator<Item = SnippetRef>) -> Self {
        let mut selected: Vec<ScoredSnippet> = refs
            .into_iter()
            .map(|snippet_ref| ScoredSnippet {
                snippet_ref,
                score: 0.0,
            })
            .collect();
        rank(&mut selected);
        selected.dedup_by(|a, b| a.snippet_ref == b.snippet_ref);
        SnippetSelection {
            instance_id: instance_id.into(),
            selected,
            threshold_used: f64::NEG_INFINITY,
        }
    }

    pub fn refs(&self) -> BTreeSet<SnippetRef> {
        self.selected.iter().map(|s| s.snippet_ref.clone()).collect()
    }

    pub fn is_empty(&self) -> bool {
        self.selected.is_empty()
    }

    pub fn len(&self) -> usize {
        self.selected.len()
    }
}

/// Scores and ranks every candidate.
pub fn score_candidates(
    scorer: &dyn SnippetScorer,
    context: &DialogueContext,
    candidates: &CandidateSet<'_>,
) -> Result<Vec<ScoredSnippet>> {
    if candidates.is_empty() {
        return Ok(Vec::new());
    }
    let scores = scorer.score_batch(context, &candidates.candidates)?;
    if scores.len() != candidates.len() {
        return Err(crate::Error::Protocol {
            endpoint: scorer.name().to_string(),
            message: format!("{} scores for {} candidates", scores.len(), candidates.len()),
        });
    }
    if let Some(bad) = scores.iter().find(|s| !s.is_finite()) {
        return Err(crate::Error::Protocol {
            endpoint: scorer.name().to_string(),
            message: format!("non-finite score {bad}"),
        });
    }
    let mut ranked: Vec<ScoredSnippet> = candidates
        .candidates
        .iter()
        .zip(scores)
        .map(|(s, score)| ScoredSnippet {
            snippet_ref: s.snippet_ref.clone(),
            score,
        })
        .collect();
    rank(&mut ranked);
    Ok(ranked)
}

/// Keeps every ranked snippet with `score >= threshold`.
pub fn select_from_ranked(instance_id: &str, ranked: &[ScoredSnippet], threshold: f64) -> SnippetSelection {
    SnippetSelection {
        instance_id: instance_id.to_string(),
        selected: ranked.iter().filter(|s| s.score >= threshold).cloned().collect(),
        threshold_used: threshold,
    }
}

pub fn select_snippets(
    scorer: &dyn SnippetScorer,
    threshold: f64,
    context: &DialogueContext,
    candidates: &CandidateSet<'_>,
) -> Result<SnippetSelection> {
    let ranked = score_candidates(scorer, context, candidates)?;
    Ok(select_from_ranked(&candidates.instance_id, &ranked, threshold))
}
