use std::collections::HashMap;
use std::hash::Hash;

use rust_stemmers::{Algorithm, Stemmer};
use serde::{Deserialize, Serialize};

use crate::corpus::tokenize;
use crate::error::{Error, Result};

/// Count substituted for an n-gram order with no matches.
pub const BLEU_EPSILON: f64 = 0.1;
const BLEU_ORDER: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct GenerationScores {
    pub bleu: f64,
    pub rouge1: f64,
    pub rouge2: f64,
    #[serde(rename = "rougeL")]
    pub rouge_l: f64,
    pub meteor: f64,
    pub avg_response_length: f64,
}

fn ngram_counts<T: Hash + Eq>(tokens: &[T], n: usize) -> HashMap<&[T], usize> {
    let mut counts = HashMap::new();
    if n > 0 && tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

fn clipped_overlap<T: Hash + Eq>(hyp: &HashMap<&[T], usize>, reference: &HashMap<&[T], usize>) -> usize {
    hyp.iter()
        .map(|(g, &c)| c.min(reference.get(g).copied().unwrap_or(0)))
        .sum()
}

/// Corpus-level BLEU-4 with uniform weights and brevity penalty. An order
/// with zero clipped matches uses [`BLEU_EPSILON`] in place of the count.
pub fn corpus_bleu_tokens<T: AsRef<str>>(hypotheses: &[Vec<T>], references: &[Vec<T>]) -> Result<f64> {
    if hypotheses.is_empty() {
        return Err(Error::Precondition("BLEU over an empty corpus".into()));
    }
    if hypotheses.len() != references.len() {
        return Err(Error::Precondition(format!(
            "BLEU: {} hypotheses but {} references",
            hypotheses.len(),
            references.len()
        )));
    }
    let mut matches = [0usize; BLEU_ORDER];
    let mut totals = [0usize; BLEU_ORDER];
    let (mut hyp_len, mut ref_len) = (0usize, 0usize);
    for (h, r) in hypotheses.iter().zip(references) {
        let h: Vec<&str> = h.iter().map(AsRef::as_ref).collect();
        let r: Vec<&str> = r.iter().map(AsRef::as_ref).collect();
        hyp_len += h.len();
        ref_len += r.len();
        for n in 1..=BLEU_ORDER {
            let hc = ngram_counts(&h, n);
            matches[n - 1] += clipped_overlap(&hc, &ngram_counts(&r, n));
            totals[n - 1] += h.len().saturating_sub(n - 1);
        }
    }
    if hyp_len == 0 {
        return Ok(0.0);
    }
    let log_precision: f64 = (0..BLEU_ORDER)
        .map(|i| {
            let num = if matches[i] == 0 { BLEU_EPSILON } else { matches[i] as f64 };
            (num / totals[i].max(1) as f64).ln()
        })
        .sum::<f64>()
        / BLEU_ORDER as f64;
    let brevity = if hyp_len >= ref_len {
        1.0
    } else {
        (1.0 - ref_len as f64 / hyp_len as f64).exp()
    };
    Ok(brevity * log_precision.exp())
}

pub fn corpus_bleu(hypotheses: &[&str], references: &[&str]) -> Result<f64> {
    let h: Vec<Vec<String>> = hypotheses.iter().map(|t| tokenize(t)).collect();
    let r: Vec<Vec<String>> = references.iter().map(|t| tokenize(t)).collect();
    corpus_bleu_tokens(&h, &r)
}

fn f1(overlap: usize, hyp_total: usize, ref_total: usize) -> f64 {
    if overlap == 0 || hyp_total == 0 || ref_total == 0 {
        return 0.0;
    }
    let p = overlap as f64 / hyp_total as f64;
    let r = overlap as f64 / ref_total as f64;
    2.0 * p * r / (p + r)
}

/// ROUGE-N F1 (β = 1) with clipped n-gram counts.
pub fn rouge_n_tokens<T: Hash + Eq>(hypothesis: &[T], reference: &[T], n: usize) -> f64 {
    let h = ngram_counts(hypothesis, n);
    let r = ngram_counts(reference, n);
    f1(
        clipped_overlap(&h, &r),
        h.values().sum(),
        r.values().sum(),
    )
}

pub fn rouge_n(hypothesis: &str, reference: &str, n: usize) -> f64 {
    rouge_n_tokens(&tokenize(hypothesis), &tokenize(reference), n)
}

fn lcs_len<T: Eq>(a: &[T], b: &[T]) -> usize {
    let mut row = vec![0usize; b.len() + 1];
    for x in a {
        let mut diag = 0;
        for (j, y) in b.iter().enumerate() {
            let up = row[j + 1];
            row[j + 1] = if x == y { diag + 1 } else { up.max(row[j]) };
            diag = up;
        }
    }
    row[b.len()]
}

/// ROUGE-L F1 over token LCS.
pub fn rouge_l_tokens<T: Eq>(hypothesis: &[T], reference: &[T]) -> f64 {
    f1(lcs_len(hypothesis, reference), hypothesis.len(), reference.len())
}

pub fn rouge_l(hypothesis: &str, reference: &str) -> f64 {
    rouge_l_tokens(&tokenize(hypothesis), &tokenize(reference))
}

/// Above this many candidate alignments, a stage pairs the k-th occurrence
/// in the hypothesis with the k-th in the reference instead of searching.
const EXHAUSTIVE_LIMIT: f64 = 200_000.0;

/// (hypothesis position, reference position)
type Alignment = Vec<(usize, usize)>;

fn chunk_count(alignment: &[(usize, usize)]) -> usize {
    let mut sorted = alignment.to_vec();
    sorted.sort_unstable();
    if sorted.is_empty() {
        return 0;
    }
    1 + sorted
        .windows(2)
        .filter(|w| !(w[1].0 == w[0].0 + 1 && w[1].1 == w[0].1 + 1))
        .count()
}

/// Positions sharing a key: (hypothesis positions, reference positions).
fn key_groups(hyp_keys: &[Option<String>], ref_keys: &[Option<String>]) -> Vec<(Vec<usize>, Vec<usize>)> {
    let mut by_key: HashMap<&str, (Vec<usize>, Vec<usize>)> = HashMap::new();
    for (i, k) in hyp_keys.iter().enumerate() {
        if let Some(k) = k {
            by_key.entry(k).or_default().0.push(i);
        }
    }
    for (j, k) in ref_keys.iter().enumerate() {
        if let Some(k) = k {
            if let Some(e) = by_key.get_mut(k.as_str()) {
                e.1.push(j);
            }
        }
    }
    let mut groups: Vec<_> = by_key
        .into_values()
        .filter(|(h, r)| !h.is_empty() && !r.is_empty())
        .collect();
    groups.sort();
    groups
}

/// Number of maximum-cardinality matchings: P(max, min) per key.
fn matching_space(groups: &[(Vec<usize>, Vec<usize>)]) -> f64 {
    groups
        .iter()
        .map(|(h, r)| {
            let (big, small) = (h.len().max(r.len()), h.len().min(r.len()));
            ((big - small + 1)..=big).map(|x| x as f64).product::<f64>()
        })
        .product()
}

/// Every maximum-cardinality matching between equal keys, each appended
/// to `fixed`.
fn all_matchings(groups: &[(Vec<usize>, Vec<usize>)], fixed: &Alignment) -> Vec<Alignment> {
    fn pick(
        groups: &[(Vec<usize>, Vec<usize>)],
        g: usize,
        current: &mut Alignment,
        out: &mut Vec<Alignment>,
    ) {
        if g == groups.len() {
            out.push(current.clone());
            return;
        }
        let (h, r) = &groups[g];
        // injective maps from the smaller side into the larger
        fn inject(
            small: &[usize],
            big: &[usize],
            flip: bool,
            used: &mut Vec<bool>,
            k: usize,
            current: &mut Alignment,
            next: &mut dyn FnMut(&mut Alignment),
        ) {
            if k == small.len() {
                next(current);
                return;
            }
            for (b, &pos) in big.iter().enumerate() {
                if !used[b] {
                    used[b] = true;
                    current.push(if flip { (pos, small[k]) } else { (small[k], pos) });
                    inject(small, big, flip, used, k + 1, current, next);
                    current.pop();
                    used[b] = false;
                }
            }
        }
        let (small, big, flip) = if h.len() <= r.len() { (h, r, false) } else { (r, h, true) };
        let mut used = vec![false; big.len()];
        inject(small, big, flip, &mut used, 0, current, &mut |c| pick(groups, g + 1, c, out));
    }
    let mut out = Vec::new();
    pick(groups, 0, &mut fixed.clone(), &mut out);
    out
}

fn greedy_matching(groups: &[(Vec<usize>, Vec<usize>)], fixed: &Alignment) -> Alignment {
    let mut out = fixed.clone();
    for (h, r) in groups {
        out.extend(h.iter().copied().zip(r.iter().copied()));
    }
    out
}

/// Exact then stem alignment. Each stage matches as many still unaligned
/// positions as possible; among those alignments the one with the fewest
/// chunks overall is kept (first found on ties).
fn meteor_alignment<T: AsRef<str>>(hypothesis: &[T], reference: &[T]) -> Alignment {
    let exact_h: Vec<Option<String>> = hypothesis.iter().map(|t| Some(t.as_ref().to_string())).collect();
    let exact_r: Vec<Option<String>> = reference.iter().map(|t| Some(t.as_ref().to_string())).collect();
    let exact_groups = key_groups(&exact_h, &exact_r);
    let stemmer = Stemmer::create(Algorithm::English);
    let h_stems: Vec<String> = hypothesis.iter().map(|t| stemmer.stem(t.as_ref()).into_owned()).collect();
    let r_stems: Vec<String> = reference.iter().map(|t| stemmer.stem(t.as_ref()).into_owned()).collect();
    let stem_groups = |a1: &Alignment| {
        let keys = |stems: &[String], done: &dyn Fn(usize) -> bool| -> Vec<Option<String>> {
            stems
                .iter()
                .enumerate()
                .map(|(i, s)| (!done(i)).then(|| s.clone()))
                .collect()
        };
        key_groups(
            &keys(&h_stems, &|i| a1.iter().any(|&(h, _)| h == i)),
            &keys(&r_stems, &|j| a1.iter().any(|&(_, r)| r == j)),
        )
    };

    let first = greedy_matching(&exact_groups, &Vec::new());
    let space = matching_space(&exact_groups) * matching_space(&stem_groups(&first));
    if space > EXHAUSTIVE_LIMIT {
        return greedy_matching(&stem_groups(&first), &first);
    }
    let mut best: Option<(usize, Alignment)> = None;
    for a1 in all_matchings(&exact_groups, &Vec::new()) {
        for a in all_matchings(&stem_groups(&a1), &a1) {
            let chunks = chunk_count(&a);
            if best.as_ref().is_none_or(|(c, _)| chunks < *c) {
                best = Some((chunks, a));
            }
        }
    }
    best.map(|(_, a)| a).unwrap_or_default()
}

/// METEOR with exact and stem matching stages and the original parameters
/// (α = 0.9, β = 3, γ = 0.5). No synonym stage.
pub fn meteor_tokens<T: AsRef<str>>(hypothesis: &[T], reference: &[T]) -> f64 {
    if hypothesis.is_empty() || reference.is_empty() {
        return 0.0;
    }
    let alignment = meteor_alignment(hypothesis, reference);
    let m = alignment.len();
    if m == 0 {
        return 0.0;
    }
    let p = m as f64 / hypothesis.len() as f64;
    let r = m as f64 / reference.len() as f64;
    let f_mean = 10.0 * p * r / (r + 9.0 * p);
    let penalty = 0.5 * (chunk_count(&alignment) as f64 / m as f64).powi(3);
    f_mean * (1.0 - penalty)
}

pub fn meteor(hypothesis: &str, reference: &str) -> f64 {
    meteor_tokens(&tokenize(hypothesis), &tokenize(reference))
}

impl GenerationScores {
    /// Scores aligned hypothesis/reference lists. Sentence-level measures are
    /// averaged; BLEU is corpus-level.
    pub fn compute(hypotheses: &[&str], references: &[&str]) -> Result<Self> {
        use rayon::prelude::*;
        let bleu = corpus_bleu(hypotheses, references)?;
        let per: Vec<[f64; 5]> = hypotheses
            .par_iter()
            .zip(references.par_iter())
            .map(|(h, r)| {
                let (h, r) = (tokenize(h), tokenize(r));
                [
                    rouge_n_tokens(&h, &r, 1),
                    rouge_n_tokens(&h, &r, 2),
                    rouge_l_tokens(&h, &r),
                    meteor_tokens(&h, &r),
                    h.len() as f64,
                ]
            })
            .collect();
        let n = per.len() as f64;
        let avg = |k: usize| per.iter().map(|v| v[k]).sum::<f64>() / n;
        Ok(GenerationScores {
            bleu,
            rouge1: avg(0),
            rouge2: avg(1),
            rouge_l: avg(2),
            meteor: avg(3),
            avg_response_length: avg(4),
        })
    }
}
