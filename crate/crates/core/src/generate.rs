//! Response generation from selected snippets.
//!
//! * [`generate_ext`] returns one selected snippet verbatim.
//! * [`generate_template`] states how many guests are positive, negative or
//!   lukewarm about the requested aspect, per entity.
//! * [`external_generate`] sends a [`GenerationInput`] to a remote model.
//!
//! # Template grammar
//!
//! Let `p`, `n`, `u` be the positive, negative and neutral counts of one
//! entity and `m = p + n + u` (snippets without sentiment are not counted).
//! `<w>` is `good`, `bad` or `just okay`.
//!
//! ```text
//! m = 0               I couldn't find a clear opinion on the <A> at <N>.
//! one class, m = 1    The one guest who mentions the <A> at <N> says it is <w>.
//! one class, m = 2    Both guests who mention the <A> at <N> say it is <w>.
//! one class, m >= 3   All <m> guests who mention the <A> at <N> say it is <w>.
//! otherwise           <a> of <m> guests say the <A> at <N> is <w>[, but <b> of <m> say it is <w'>][, and <u> of <m> find it just okay].
//! ```
//!
//! In the last form `a = max(p, n)` with its polarity (positive on a tie),
//! `b = min(p, n)`, and the `but` clause appears iff `b > 0`. Entity clauses
//! follow the order in which the entities were first mentioned; each one
//! after the first is introduced by "On the other hand, ". A closing
//! question from [`CLOSINGS`] ends the response.

use std::collections::{BTreeMap, HashMap};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::absa::{augment_snippet, find_aspect, Polarity, SentimentAnnotation, SentimentLexicon};
use crate::corpus::{DialogueContext, EntityKey, KnowledgeBase, SnippetRef};
use crate::error::{Error, Result};
use crate::external::{wire_context, GenerateRequest, GeneratorClient, WireTurn};
use crate::select::{rank, ScoredSnippet, SnippetSelection};
use crate::track::EntityTracker;

pub const EMPTY_RESPONSE: &str = "I don't have guest feedback on that.";

pub const CLOSINGS: [&str; 4] = [
    "Would you like to know more about them?",
    "Is there anything else I can help you with?",
    "Would you like me to book it for you?",
    "Should I look for other options?",
];

/// Aspect name used when neither annotations nor the request name one.
pub const GENERIC_ASPECT: &str = "place";

pub type Annotations = HashMap<SnippetRef, SentimentAnnotation>;

pub fn index_annotations(annotations: impl IntoIterator<Item = SentimentAnnotation>) -> Annotations {
    annotations.into_iter().map(|a| (a.snippet_ref.clone(), a)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct SentimentTally {
    pub positive: usize,
    pub neutral: usize,
    pub negative: usize,
    pub none: usize,
    pub total: usize,
}

impl SentimentTally {
    pub fn add(&mut self, polarity: Polarity) {
        match polarity {
            Polarity::Positive => self.positive += 1,
            Polarity::Neutral => self.neutral += 1,
            Polarity::Negative => self.negative += 1,
            Polarity::None => self.none += 1,
        }
        self.total += 1;
    }

    /// Snippets that carry a sentiment.
    pub fn opinions(&self) -> usize {
        self.positive + self.neutral + self.negative
    }
}

/// Per-entity sentiment counts of the selected snippets.
pub fn tally_sentiments(
    selection: &SnippetSelection,
    annotations: &Annotations,
) -> Result<BTreeMap<EntityKey, SentimentTally>> {
    let mut out: BTreeMap<EntityKey, SentimentTally> = BTreeMap::new();
    for s in &selection.selected {
        let a = annotations
            .get(&s.snippet_ref)
            .ok_or_else(|| Error::MissingAnnotation(s.snippet_ref.clone()))?;
        out.entry(s.snippet_ref.entity()).or_default().add(a.polarity);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    #[serde(rename = "ref")]
    pub snippet_ref: SnippetRef,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub polarity: Option<Polarity>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Response {
    pub text: String,
    pub provenance: Vec<Provenance>,
    /// True when the response was produced without any grounding.
    #[serde(default)]
    pub empty: bool,
}

fn fnv1a(text: &str) -> u64 {
    text.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

/// The text of one selected snippet, picked uniformly with a generator
/// seeded from `seed` and the instance id.
pub fn generate_ext(selection: &SnippetSelection, kb: &KnowledgeBase, seed: u64) -> Result<Response> {
    if selection.is_empty() {
        return Err(Error::EmptySelection);
    }
    let mut refs: Vec<&SnippetRef> = selection.selected.iter().map(|s| &s.snippet_ref).collect();
    refs.sort();
    refs.dedup();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ fnv1a(&selection.instance_id));
    let chosen = refs[rng.gen_range(0..refs.len())];
    let snippet = kb
        .snippet(chosen)
        .ok_or_else(|| Error::Integrity(format!("selected snippet {chosen} not in knowledge base")))?;
    Ok(Response {
        text: snippet.text.clone(),
        provenance: vec![Provenance {
            snippet_ref: chosen.clone(),
            polarity: None,
        }],
        empty: false,
    })
}

fn word(polarity: Polarity) -> &'static str {
    match polarity {
        Polarity::Positive => "good",
        Polarity::Negative => "bad",
        _ => "just okay",
    }
}

/// One entity's clause, per the grammar in the module docs.
pub fn entity_clause(aspect: &str, name: &str, tally: &SentimentTally) -> String {
    let (p, n, u) = (tally.positive, tally.negative, tally.neutral);
    let m = p + n + u;
    let nonzero = [p, n, u].iter().filter(|c| **c > 0).count();
    if m == 0 {
        return format!("I couldn't find a clear opinion on the {aspect} at {name}.");
    }
    if nonzero == 1 {
        let w = if p > 0 {
            word(Polarity::Positive)
        } else if n > 0 {
            word(Polarity::Negative)
        } else {
            word(Polarity::Neutral)
        };
        return match m {
            1 => format!("The one guest who mentions the {aspect} at {name} says it is {w}."),
            2 => format!("Both guests who mention the {aspect} at {name} say it is {w}."),
            _ => format!("All {m} guests who mention the {aspect} at {name} say it is {w}."),
        };
    }
    let (major, a, minor, b) = if p >= n {
        (Polarity::Positive, p, Polarity::Negative, n)
    } else {
        (Polarity::Negative, n, Polarity::Positive, p)
    };
    let mut s = format!("{a} of {m} guests say the {aspect} at {name} is {}", word(major));
    if b > 0 {
        s += &format!(", but {b} of {m} say it is {}", word(minor));
    }
    if u > 0 {
        s += &format!(", and {u} of {m} find it just okay");
    }
    s.push('.');
    s
}

/// Most frequent aspect term among the selected snippets' annotations
/// (ties to the alphabetically first), else an aspect cue of the request.
fn aspect_cue(context: &DialogueContext, selection: &SnippetSelection, annotations: &Annotations) -> String {
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for s in &selection.selected {
        if let Some(term) = annotations.get(&s.snippet_ref).and_then(|a| a.aspect_term.as_deref()) {
            *counts.entry(term).or_insert(0) += 1;
        }
    }
    let best = counts.iter().fold(None, |best: Option<(&str, usize)>, (t, c)| match best {
        Some((_, bc)) if bc >= *c => best,
        _ => Some((t, *c)),
    });
    match best {
        Some((t, _)) => t.to_string(),
        None => find_aspect(SentimentLexicon::shared(), &context.last_user().text)
            .unwrap_or_else(|| GENERIC_ASPECT.to_string()),
    }
}

/// Tallied entities ordered by their first mention in the dialogue;
/// unmentioned ones follow in key order.
fn mention_order(context: &DialogueContext, kb: &KnowledgeBase, entities: &[EntityKey]) -> Vec<EntityKey> {
    let mentioned = EntityTracker::for_keys(kb, entities).track(context).first_mention_order();
    let mut order: Vec<EntityKey> = mentioned.into_iter().filter(|e| entities.contains(e)).collect();
    for e in entities {
        if !order.contains(e) {
            order.push(e.clone());
        }
    }
    order
}

fn lowercase_first(s: &str) -> String {
    if s.starts_with("I ") || s.starts_with("I'") {
        return s.to_string();
    }
    let mut chars = s.chars();
    match chars.next() {
        Some(c) => c.to_lowercase().chain(chars).collect(),
        None => String::new(),
    }
}

pub fn generate_template(
    context: &DialogueContext,
    selection: &SnippetSelection,
    annotations: &Annotations,
    kb: &KnowledgeBase,
) -> Result<Response> {
    if selection.is_empty() {
        return Ok(Response {
            text: EMPTY_RESPONSE.to_string(),
            provenance: Vec::new(),
            empty: true,
        });
    }
    let tallies = tally_sentiments(selection, annotations)?;
    let aspect = aspect_cue(context, selection, annotations);
    let keys: Vec<EntityKey> = tallies.keys().cloned().collect();
    let mut clauses = Vec::new();
    for (i, key) in mention_order(context, kb, &keys).iter().enumerate() {
        let name = kb.entity(key).map(|e| e.name.as_str()).unwrap_or(key.entity_id.as_str());
        let clause = entity_clause(&aspect, name, &tallies[key]);
        clauses.push(if i == 0 {
            clause
        } else {
            format!("On the other hand, {}", lowercase_first(&clause))
        });
    }
    let closing = CLOSINGS[(fnv1a(&context.instance_id) % CLOSINGS.len() as u64) as usize];
    let mut refs: Vec<&ScoredSnippet> = selection.selected.iter().collect();
    refs.sort_by(|a, b| a.snippet_ref.cmp(&b.snippet_ref));
    Ok(Response {
        text: format!("{} {closing}", clauses.join(" ")),
        provenance: refs
            .into_iter()
            .map(|s| Provenance {
                snippet_ref: s.snippet_ref.clone(),
                polarity: annotations.get(&s.snippet_ref).map(|a| a.polarity),
            })
            .collect(),
        empty: false,
    })
}

/// What a neural generator sees: snippets (optionally sentiment-augmented)
/// in rank order, then the dialogue.
///
/// The wire form is the compact JSON of [`GenerateRequest`], byte for byte
/// what [`GenerationInput::to_wire`] returns:
/// `{"context":[{"speaker":"U","text":"..."},...],"snippets":["...",...]}`.
/// Speakers are `"U"`/`"S"`, fields appear in exactly this order, there is
/// no whitespace outside strings, and strings use JSON escapes for `"`, `\`
/// and control characters only (non-ASCII is written as UTF-8).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationInput {
    pub snippets: Vec<String>,
    pub context: Vec<WireTurn>,
    pub entity_names: Vec<String>,
    pub provenance: Vec<Provenance>,
}

impl GenerationInput {
    pub fn request(&self) -> GenerateRequest {
        GenerateRequest {
            context: self.context.clone(),
            snippets: self.snippets.clone(),
        }
    }

    pub fn to_wire(&self) -> String {
        serde_json::to_string(&self.request()).expect("plain strings serialize")
    }
}

pub fn build_generation_input(
    context: &DialogueContext,
    selection: &SnippetSelection,
    annotations: &Annotations,
    kb: &KnowledgeBase,
    use_absa: bool,
) -> GenerationInput {
    let mut ranked = selection.selected.clone();
    rank(&mut ranked);
    let mut snippets = Vec::new();
    let mut provenance = Vec::new();
    let mut entity_names: Vec<String> = Vec::new();
    for s in &ranked {
        let Some(snippet) = kb.snippet(&s.snippet_ref) else {
            log::warn!("{}: dropping unknown snippet {}", selection.instance_id, s.snippet_ref);
            continue;
        };
        let annotation = annotations.get(&s.snippet_ref);
        snippets.push(match (use_absa, annotation) {
            (true, Some(a)) => augment_snippet(&snippet.text, a),
            _ => snippet.text.clone(),
        });
        provenance.push(Provenance {
            snippet_ref: s.snippet_ref.clone(),
            polarity: annotation.map(|a| a.polarity),
        });
        if let Some(e) = kb.entity(&s.snippet_ref.entity()) {
            if !entity_names.contains(&e.name) {
                entity_names.push(e.name.clone());
            }
        }
    }
    GenerationInput {
        snippets,
        context: wire_context(context),
        entity_names,
        provenance,
    }
}

pub fn external_generate(client: &GeneratorClient, input: &GenerationInput) -> Result<Response> {
    Ok(Response {
        text: client.generate(&input.request())?,
        provenance: input.provenance.clone(),
        empty: input.provenance.is_empty(),
    })
}
