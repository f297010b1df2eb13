//! Aspect-based sentiment of review sentences.
//!
//! The native tagger is lexicon driven: sentiment cues are counted after
//! negation handling, and the aspect is the aspect cue closest to a cue of
//! the winning polarity. A remote tagger can be used instead through
//! [`external_tag`].

use std::collections::HashMap;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{tokenize, KnowledgeSnippet, SnippetRef};
use crate::error::{Error, Result};
use crate::external::AbsaClient;

/// Tokens after a negation marker that it can still flip.
pub const NEGATION_WINDOW: usize = 3;

const BUILTIN_LEXICON: &str = include_str!("../data/lexicon.txt");

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Polarity {
    Positive,
    Neutral,
    Negative,
    None,
}

impl Polarity {
    pub const SENTIMENTS: [Polarity; 3] = [Polarity::Positive, Polarity::Neutral, Polarity::Negative];

    pub fn as_str(self) -> &'static str {
        match self {
            Polarity::Positive => "positive",
            Polarity::Neutral => "neutral",
            Polarity::Negative => "negative",
            Polarity::None => "none",
        }
    }

    pub fn parse(s: &str) -> Option<Polarity> {
        match s.trim().to_ascii_lowercase().as_str() {
            "positive" => Some(Polarity::Positive),
            "neutral" => Some(Polarity::Neutral),
            "negative" => Some(Polarity::Negative),
            "none" => Some(Polarity::None),
            _ => None,
        }
    }

    /// The word used in augmentation phrases; `None` has no word.
    pub fn token(self) -> Option<&'static str> {
        match self {
            Polarity::Positive => Some("great"),
            Polarity::Neutral => Some("ok"),
            Polarity::Negative => Some("bad"),
            Polarity::None => None,
        }
    }

    pub fn from_token(token: &str) -> Option<Polarity> {
        Polarity::SENTIMENTS.into_iter().find(|p| p.token() == Some(token))
    }
}

impl fmt::Display for Polarity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SentimentAnnotation {
    #[serde(rename = "ref")]
    pub snippet_ref: SnippetRef,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub aspect_term: Option<String>,
    pub polarity: Polarity,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Cue {
    Positive,
    Negative,
    Negation,
    Hedge,
    Aspect,
}

impl Cue {
    fn from_prefix(c: char) -> Option<Cue> {
        match c {
            '+' => Some(Cue::Positive),
            '-' => Some(Cue::Negative),
            '!' => Some(Cue::Negation),
            '~' => Some(Cue::Hedge),
            '@' => Some(Cue::Aspect),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct SentimentLexicon {
    entries: HashMap<Vec<String>, Cue>,
    longest: usize,
}

impl SentimentLexicon {
    /// The lexicon shipped with the crate.
    pub fn builtin() -> Self {
        Self::parse(BUILTIN_LEXICON).expect("built-in lexicon is valid")
    }

    /// The built-in lexicon, parsed once.
    pub fn shared() -> &'static SentimentLexicon {
        static SHARED: std::sync::OnceLock<SentimentLexicon> = std::sync::OnceLock::new();
        SHARED.get_or_init(Self::builtin)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// One entry per line: a sign prefix (`+ - ! ~ @`) then the term.
    pub fn parse(text: &str) -> Result<Self> {
        let mut lex = SentimentLexicon::default();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let mut chars = line.chars();
            let prefix = chars.next().unwrap();
            let cue = Cue::from_prefix(prefix)
                .ok_or_else(|| Error::Config(format!("lexicon line {}: unknown prefix {prefix:?}", n + 1)))?;
            let term = words(chars.as_str());
            if term.is_empty() {
                return Err(Error::Config(format!("lexicon line {}: empty term", n + 1)));
            }
            if let Some(prev) = lex.entries.get(&term) {
                if *prev != cue {
                    return Err(Error::Config(format!(
                        "lexicon line {}: {:?} listed with two different signs",
                        n + 1,
                        term.join(" ")
                    )));
                }
            }
            lex.longest = lex.longest.max(term.len());
            lex.entries.insert(term, cue);
        }
        Ok(lex)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    fn terms(&self, cue: Cue) -> impl Iterator<Item = String> + '_ {
        self.entries
            .iter()
            .filter(move |(_, c)| **c == cue)
            .map(|(t, _)| t.join(" "))
    }

    pub fn positive_terms(&self) -> impl Iterator<Item = String> + '_ {
        self.terms(Cue::Positive)
    }

    pub fn negative_terms(&self) -> impl Iterator<Item = String> + '_ {
        self.terms(Cue::Negative)
    }

    /// Greedy longest-match segmentation of `tokens` into lexicon hits.
    fn hits(&self, tokens: &[String]) -> Vec<(usize, usize, Cue)> {
        let mut out = Vec::new();
        let mut i = 0;
        while i < tokens.len() {
            let max = self.longest.min(tokens.len() - i);
            let found = (1..=max)
                .rev()
                .find_map(|len| self.entries.get(&tokens[i..i + len]).map(|&c| (len, c)));
            match found {
                Some((len, cue)) => {
                    out.push((i, len, cue));
                    i += len;
                }
                None => i += 1,
            }
        }
        out
    }
}

/// The first aspect cue in `text`.
pub fn find_aspect(lexicon: &SentimentLexicon, text: &str) -> Option<String> {
    let tokens = words(text);
    lexicon
        .hits(&tokens)
        .into_iter()
        .find(|h| h.2 == Cue::Aspect)
        .map(|(s, l, _)| tokens[s..s + l].join(" "))
}

/// Lowercased word tokens; punctuation-only tokens are dropped so that
/// "wi-fi" and "wi fi" read the same.
fn words(text: &str) -> Vec<String> {
    tokenize(text)
        .into_iter()
        .filter(|t| t.chars().any(|c| c.is_alphanumeric()))
        .collect()
}

const STOPWORDS: &[&str] = &[
    "a", "about", "after", "all", "also", "am", "an", "and", "any", "are", "as", "at", "be", "been", "being",
    "but", "by", "came", "can", "could", "did", "do", "does", "during", "each", "even", "every", "for", "from",
    "get", "got", "had", "has", "have", "he", "her", "here", "him", "his", "how", "i", "if", "in", "into", "is",
    "it", "its", "just", "let", "made", "make", "me", "more", "most", "much", "my", "of", "on", "one", "only",
    "or", "other", "our", "out", "over", "really", "she", "should", "so", "some", "such", "than", "that", "the",
    "their", "them", "then", "there", "these", "they", "this", "those", "to", "too", "up", "us", "very", "was",
    "we", "went", "were", "what", "when", "where", "which", "while", "who", "will", "with", "would", "you",
    "your", "'s", "'re", "'ve", "'ll", "'d", "'m", "quite", "extremely", "incredibly", "definitely", "again",
    "stayed", "stay", "arrived", "found", "felt", "seemed", "took", "go", "come", "although", "however", "though",
];

/// Aspect term and polarity of one sentence.
///
/// Each positive or negative cue is flipped when an odd number of negation
/// markers precede it within [`NEGATION_WINDOW`] tokens (a negation marker
/// restarts the window). Positive beats negative on count; a nonzero tie,
/// or hedges alone, give neutral; no cue at all gives none.
pub fn tag_sentence(lexicon: &SentimentLexicon, text: &str) -> (Option<String>, Polarity) {
    let tokens = words(text);
    let hits = lexicon.hits(&tokens);

    let mut negated = false;
    let mut window_end = 0usize;
    let mut cues: Vec<(usize, Polarity)> = Vec::new();
    let mut aspects: Vec<(usize, String)> = Vec::new();
    let mut hedges = 0usize;
    for &(start, len, cue) in &hits {
        if start >= window_end {
            negated = false;
        }
        match cue {
            Cue::Negation => {
                negated = !negated;
                window_end = start + len + NEGATION_WINDOW;
            }
            Cue::Positive | Cue::Negative => {
                let positive = (cue == Cue::Positive) != negated;
                cues.push((start, if positive { Polarity::Positive } else { Polarity::Negative }));
            }
            Cue::Hedge => hedges += 1,
            Cue::Aspect => aspects.push((start, tokens[start..start + len].join(" "))),
        }
    }

    let pos = cues.iter().filter(|c| c.1 == Polarity::Positive).count();
    let neg = cues.len() - pos;
    let polarity = match pos.cmp(&neg) {
        std::cmp::Ordering::Greater => Polarity::Positive,
        std::cmp::Ordering::Less => Polarity::Negative,
        std::cmp::Ordering::Equal if pos > 0 || hedges > 0 => Polarity::Neutral,
        std::cmp::Ordering::Equal => return (None, Polarity::None),
    };

    let anchors: Vec<usize> = cues
        .iter()
        .filter(|c| polarity == Polarity::Neutral || c.1 == polarity)
        .map(|c| c.0)
        .collect();
    let nearest = aspects
        .iter()
        .min_by_key(|(at, _)| anchors.iter().map(|a| a.abs_diff(*at)).min().unwrap_or(usize::MAX))
        .map(|(_, term)| term.clone());
    let aspect = nearest.or_else(|| {
        let used: Vec<usize> = hits.iter().flat_map(|&(s, l, _)| s..s + l).collect();
        tokens
            .iter()
            .enumerate()
            .find(|(i, t)| {
                !used.contains(i)
                    && t.chars().all(|c| c.is_alphabetic())
                    && t.chars().count() > 2
                    && !STOPWORDS.contains(&t.as_str())
            })
            .map(|(_, t)| t.clone())
    });
    match aspect {
        Some(a) => (Some(a), polarity),
        None => (None, Polarity::None),
    }
}

pub fn tag_snippet(lexicon: &SentimentLexicon, snippet: &KnowledgeSnippet) -> SentimentAnnotation {
    let (aspect_term, polarity) = tag_sentence(lexicon, &snippet.text);
    SentimentAnnotation {
        snippet_ref: snippet.snippet_ref.clone(),
        aspect_term,
        polarity,
    }
}

/// `"<aspect> is great."`, `"... ok."` or `"... bad."`.
pub fn polarity_phrase(aspect_term: &str, polarity: Polarity) -> Result<String> {
    let token = polarity
        .token()
        .ok_or_else(|| Error::Precondition("no polarity phrase for polarity none".into()))?;
    Ok(format!("{aspect_term} is {token}."))
}

/// Appends the polarity phrase to the snippet text; unchanged when there is
/// nothing to append.
pub fn augment_snippet(text: &str, annotation: &SentimentAnnotation) -> String {
    match (&annotation.aspect_term, annotation.polarity.token()) {
        (Some(aspect), Some(token)) => format!("{text} {aspect} is {token}."),
        _ => text.to_string(),
    }
}

/// Tags through the remote service. Transport failures fall back to the
/// lexicon when one is given; protocol errors are always returned.
pub fn external_tag(
    client: &AbsaClient,
    snippet: &KnowledgeSnippet,
    fallback: Option<&SentimentLexicon>,
) -> Result<SentimentAnnotation> {
    match client.tag(&snippet.text) {
        Ok((aspect_term, polarity)) => Ok(SentimentAnnotation {
            snippet_ref: snippet.snippet_ref.clone(),
            aspect_term,
            polarity,
        }),
        Err(e) if e.is_retriable() && fallback.is_some() => {
            log::warn!("{e}; tagging {} with the lexicon", snippet.snippet_ref);
            Ok(tag_snippet(fallback.unwrap(), snippet))
        }
        Err(e) => Err(e),
    }
}
