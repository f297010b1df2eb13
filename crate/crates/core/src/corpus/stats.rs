use serde::Serialize;

use super::{tokenize, KnowledgeBase, Split};

/// Dataset statistics in the shape of the usual "basic statistics" table.
/// Averages are over target (knowledge-seeking) instances.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CorpusStats {
    pub split: String,
    pub instances: usize,
    pub target_instances: usize,
    pub non_target_instances: usize,
    pub multi_entity_instances: usize,
    pub avg_snippets_per_instance: f64,
    /// `None` when no knowledge base was supplied.
    pub avg_tokens_per_snippet: Option<f64>,
    pub avg_utterances_per_instance: f64,
    pub avg_tokens_per_request: f64,
    pub avg_tokens_per_response: f64,
}

fn mean(sum: usize, n: usize) -> f64 {
    if n == 0 {
        0.0
    } else {
        sum as f64 / n as f64
    }
}

pub fn corpus_stats(split: &Split, kb: Option<&KnowledgeBase>) -> CorpusStats {
    let targets: Vec<_> = split.targets().collect();
    let n = targets.len();
    let snippets: usize = targets.iter().map(|i| i.label.gold_snippets.len()).sum();
    let utterances: usize = targets.iter().map(|i| i.context.utterances.len()).sum();
    let request_tokens: usize = targets
        .iter()
        .map(|i| tokenize(&i.context.last_user().text).len())
        .sum();
    let response_tokens: usize = targets
        .iter()
        .filter_map(|i| i.label.reference_response.as_deref())
        .map(|r| tokenize(r).len())
        .sum();
    let multi = targets
        .iter()
        .filter(|i| i.label.gold_entities().len() > 1)
        .count();
    let avg_tokens_per_snippet = kb.map(|kb| {
        let texts: Vec<&str> = targets
            .iter()
            .flat_map(|i| i.label.gold_snippets.iter())
            .filter_map(|r| kb.snippet(r))
            .map(|s| s.text.as_str())
            .collect();
        mean(texts.iter().map(|t| tokenize(t).len()).sum(), texts.len())
    });
    CorpusStats {
        split: split.name.to_string(),
        instances: split.len(),
        target_instances: n,
        non_target_instances: split.len() - n,
        multi_entity_instances: multi,
        avg_snippets_per_instance: mean(snippets, n),
        avg_tokens_per_snippet,
        avg_utterances_per_instance: mean(utterances, n),
        avg_tokens_per_request: mean(request_tokens, n),
        avg_tokens_per_response: mean(response_tokens, n),
    }
}
