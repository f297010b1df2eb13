//! Dialogues, labels and the review knowledge base.
//!
//! On-disk layout (UTF-8 JSON, one directory per dataset):
//!
//! ```text
//! <data-dir>/knowledge.json          domain -> entity id -> {name, reviews}
//! <data-dir>/<split>/logs.json       [[{"speaker": "U"|"S", "text": ...}, ...], ...]
//! <data-dir>/<split>/labels.json     [{"target": bool, "knowledge": [...], "response": ...}, ...]
//! ```
//!
//! `knowledge.json` maps each domain (`hotel`, `restaurant`) to an object keyed
//! by entity id; every entity has a `name` and `reviews`, an object keyed by
//! review id whose values carry `sentences`, an object keyed by sentence id.
//! Other entity fields (such as `faqs`) are ignored. Labels reference review
//! sentences as `{"domain", "entity_id", "doc_id", "sent_id"}`; entity and
//! document ids may be numbers or strings. See [`io`] for the adapter rules.

mod io;
mod stats;
mod tokenize;

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use io::{load_knowledge_base, load_split, write_knowledge_base, write_split, LoadReport};
pub use stats::{corpus_stats, CorpusStats};
pub use tokenize::tokenize;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Speaker {
    #[serde(rename = "U")]
    User,
    #[serde(rename = "S")]
    System,
}

impl Speaker {
    pub fn tag(self) -> &'static str {
        match self {
            Speaker::User => "U",
            Speaker::System => "S",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Utterance {
    pub speaker: Speaker,
    pub text: String,
    pub turn_index: usize,
}

/// A dialogue that ends in a user turn.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DialogueContext {
    pub instance_id: String,
    pub utterances: Vec<Utterance>,
}

impl DialogueContext {
    /// Builds a context from `(speaker, text)` pairs, numbering the turns.
    pub fn new<S: Into<String>>(
        instance_id: impl Into<String>,
        turns: impl IntoIterator<Item = (Speaker, S)>,
    ) -> Result<Self> {
        let ctx = DialogueContext {
            instance_id: instance_id.into(),
            utterances: turns
                .into_iter()
                .enumerate()
                .map(|(turn_index, (speaker, text))| Utterance {
                    speaker,
                    text: text.into(),
                    turn_index,
                })
                .collect(),
        };
        ctx.validate()?;
        Ok(ctx)
    }

    pub fn validate(&self) -> Result<()> {
        let id = &self.instance_id;
        let Some(last) = self.utterances.last() else {
            return Err(Error::Integrity(format!("{id}: empty dialogue")));
        };
        if last.speaker != Speaker::User {
            return Err(Error::Precondition(format!(
                "{id}: last turn must be a user turn"
            )));
        }
        for (i, u) in self.utterances.iter().enumerate() {
            if u.text.trim().is_empty() {
                return Err(Error::Integrity(format!("{id}: turn {i} is empty")));
            }
            if i > 0 {
                let prev = &self.utterances[i - 1];
                if prev.speaker == u.speaker {
                    return Err(Error::Integrity(format!(
                        "{id}: turns {} and {i} have the same speaker",
                        i - 1
                    )));
                }
                if u.turn_index <= prev.turn_index {
                    return Err(Error::Integrity(format!(
                        "{id}: turn indices must increase"
                    )));
                }
            }
        }
        Ok(())
    }

    /// The final user request.
    pub fn last_user(&self) -> &Utterance {
        self.utterances
            .last()
            .expect("validated contexts are non-empty")
    }

    /// The system turn right before the final request, if any.
    pub fn previous_system(&self) -> Option<&Utterance> {
        let n = self.utterances.len();
        (n >= 2)
            .then(|| &self.utterances[n - 2])
            .filter(|u| u.speaker == Speaker::System)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Hotel,
    Restaurant,
}

impl Domain {
    pub const ALL: [Domain; 2] = [Domain::Hotel, Domain::Restaurant];

    pub fn as_str(self) -> &'static str {
        match self {
            Domain::Hotel => "hotel",
            Domain::Restaurant => "restaurant",
        }
    }

    pub fn parse(s: &str) -> Option<Domain> {
        match s {
            "hotel" => Some(Domain::Hotel),
            "restaurant" => Some(Domain::Restaurant),
            _ => None,
        }
    }
}

impl fmt::Display for Domain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct EntityKey {
    pub domain: Domain,
    pub entity_id: String,
}

impl fmt::Display for EntityKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.domain, self.entity_id)
    }
}

/// Address of one review sentence. Orders lexicographically field by field,
/// which is the tie-break used wherever scores are equal.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SnippetRef {
    pub domain: Domain,
    pub entity_id: String,
    pub review_id: String,
    pub sentence_id: String,
}

impl SnippetRef {
    pub fn new(
        domain: Domain,
        entity_id: impl Into<String>,
        review_id: impl Into<String>,
        sentence_id: impl Into<String>,
    ) -> Self {
        SnippetRef {
            domain,
            entity_id: entity_id.into(),
            review_id: review_id.into(),
            sentence_id: sentence_id.into(),
        }
    }

    pub fn entity(&self) -> EntityKey {
        EntityKey {
            domain: self.domain,
            entity_id: self.entity_id.clone(),
        }
    }
}

impl fmt::Display for SnippetRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}/{}/{}/{}",
            self.domain, self.entity_id, self.review_id, self.sentence_id
        )
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KnowledgeSnippet {
    #[serde(rename = "ref")]
    pub snippet_ref: SnippetRef,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Entity {
    pub domain: Domain,
    pub entity_id: String,
    pub name: String,
}

impl Entity {
    pub fn key(&self) -> EntityKey {
        EntityKey {
            domain: self.domain,
            entity_id: self.entity_id.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Review {
    pub review_id: String,
    /// Range into [`KnowledgeBase::snippets`].
    pub sentences: Range<usize>,
}

/// Entities with their reviews, flattened so that every review sentence has a
/// dense index. Each entity's sentences occupy one contiguous range.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct KnowledgeBase {
    entities: Vec<Entity>,
    entity_index: HashMap<EntityKey, usize>,
    reviews: Vec<Vec<Review>>,
    entity_snippets: Vec<Range<usize>>,
    snippets: Vec<KnowledgeSnippet>,
    snippet_index: HashMap<SnippetRef, usize>,
}

/// Incremental construction; used by the loader and by tests.
#[derive(Debug, Default)]
pub struct KnowledgeBaseBuilder {
    kb: KnowledgeBase,
}

impl KnowledgeBaseBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn entity(
        &mut self,
        domain: Domain,
        entity_id: impl Into<String>,
        name: impl Into<String>,
    ) -> Result<&mut Self> {
        let entity = Entity {
            domain,
            entity_id: entity_id.into(),
            name: name.into(),
        };
        if entity.name.trim().is_empty() {
            return Err(Error::Integrity(format!("entity {} has no name", entity.key())));
        }
        let key = entity.key();
        if self.kb.entity_index.contains_key(&key) {
            return Err(Error::Integrity(format!("duplicate entity {key}")));
        }
        let start = self.kb.snippets.len();
        self.kb.entity_index.insert(key, self.kb.entities.len());
        self.kb.entities.push(entity);
        self.kb.reviews.push(Vec::new());
        self.kb.entity_snippets.push(start..start);
        Ok(self)
    }

    /// Adds a review to the most recently added entity.
    pub fn review<S: Into<String>>(
        &mut self,
        review_id: impl Into<String>,
        sentences: impl IntoIterator<Item = (String, S)>,
    ) -> Result<&mut Self> {
        let Some(entity) = self.kb.entities.last() else {
            return Err(Error::Integrity("review added before any entity".into()));
        };
        let (domain, entity_id) = (entity.domain, entity.entity_id.clone());
        let review_id = review_id.into();
        let e = self.kb.entities.len() - 1;
        if self.kb.reviews[e].iter().any(|r| r.review_id == review_id) {
            return Err(Error::Integrity(format!(
                "duplicate review {domain}/{entity_id}/{review_id}"
            )));
        }
        let start = self.kb.snippets.len();
        for (sentence_id, text) in sentences {
            let text = text.into();
            let snippet_ref = SnippetRef::new(domain, &entity_id, &review_id, sentence_id);
            if text.trim().is_empty() {
                return Err(Error::Integrity(format!("snippet {snippet_ref} is empty")));
            }
            if self.kb.snippet_index.contains_key(&snippet_ref) {
                return Err(Error::Integrity(format!("duplicate snippet {snippet_ref}")));
            }
            self.kb
                .snippet_index
                .insert(snippet_ref.clone(), self.kb.snippets.len());
            self.kb.snippets.push(KnowledgeSnippet { snippet_ref, text });
        }
        let end = self.kb.snippets.len();
        self.kb.reviews[e].push(Review {
            review_id,
            sentences: start..end,
        });
        self.kb.entity_snippets[e].end = end;
        Ok(self)
    }

    pub fn build(self) -> KnowledgeBase {
        self.kb
    }
}

impl KnowledgeBase {
    pub fn builder() -> KnowledgeBaseBuilder {
        KnowledgeBaseBuilder::new()
    }

    pub fn entity_count(&self) -> usize {
        self.entities.len()
    }

    pub fn review_count(&self) -> usize {
        self.reviews.iter().map(Vec::len).sum()
    }

    pub fn snippet_count(&self) -> usize {
        self.snippets.len()
    }

    pub fn entities(&self) -> &[Entity] {
        &self.entities
    }

    pub fn entities_in(&self, domain: Domain) -> impl Iterator<Item = &Entity> {
        self.entities.iter().filter(move |e| e.domain == domain)
    }

    pub fn entity(&self, key: &EntityKey) -> Option<&Entity> {
        self.entity_index.get(key).map(|&i| &self.entities[i])
    }

    pub fn entity_position(&self, key: &EntityKey) -> Option<usize> {
        self.entity_index.get(key).copied()
    }

    pub fn snippets(&self) -> &[KnowledgeSnippet] {
        &self.snippets
    }

    pub fn snippet(&self, r: &SnippetRef) -> Option<&KnowledgeSnippet> {
        self.snippet_index.get(r).map(|&i| &self.snippets[i])
    }

    /// Dense index of a snippet, as used by [`crate::select::LexicalIndex`].
    pub fn snippet_position(&self, r: &SnippetRef) -> Option<usize> {
        self.snippet_index.get(r).copied()
    }

    pub fn reviews_of(&self, key: &EntityKey) -> &[Review] {
        self.entity_index
            .get(key)
            .map(|&i| self.reviews[i].as_slice())
            .unwrap_or(&[])
    }

    /// Dense snippet positions of all review sentences of an entity.
    pub fn snippet_range(&self, key: &EntityKey) -> Range<usize> {
        self.entity_index
            .get(key)
            .map(|&i| self.entity_snippets[i].clone())
            .unwrap_or(0..0)
    }

    pub fn snippets_of(&self, key: &EntityKey) -> &[KnowledgeSnippet] {
        &self.snippets[self.snippet_range(key)]
    }

    pub fn contains(&self, r: &SnippetRef) -> bool {
        self.snippet_index.contains_key(r)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InstanceLabel {
    pub target: bool,
    pub gold_snippets: BTreeSet<SnippetRef>,
    pub reference_response: Option<String>,
}

impl InstanceLabel {
    pub fn negative() -> Self {
        InstanceLabel {
            target: false,
            gold_snippets: BTreeSet::new(),
            reference_response: None,
        }
    }

    pub fn validate(&self, instance_id: &str) -> Result<()> {
        let consistent = if self.target {
            !self.gold_snippets.is_empty() && self.reference_response.is_some()
        } else {
            self.gold_snippets.is_empty() && self.reference_response.is_none()
        };
        if consistent {
            Ok(())
        } else {
            Err(Error::Integrity(format!(
                "{instance_id}: target={} requires {} gold snippets and reference response",
                self.target,
                if self.target { "non-empty" } else { "no" }
            )))
        }
    }

    /// Entities referenced by the gold snippets, in ref order.
    pub fn gold_entities(&self) -> BTreeSet<EntityKey> {
        self.gold_snippets.iter().map(SnippetRef::entity).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitName {
    Train,
    Val,
    Test,
}

impl SplitName {
    pub fn as_str(self) -> &'static str {
        match self {
            SplitName::Train => "train",
            SplitName::Val => "val",
            SplitName::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Option<SplitName> {
        match s {
            "train" => Some(SplitName::Train),
            "val" | "valid" | "validation" => Some(SplitName::Val),
            "test" => Some(SplitName::Test),
            _ => None,
        }
    }
}

impl fmt::Display for SplitName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Instance {
    pub context: DialogueContext,
    pub label: InstanceLabel,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Split {
    pub name: SplitName,
    pub instances: Vec<Instance>,
}

impl Split {
    pub fn new(name: SplitName, instances: Vec<Instance>) -> Result<Self> {
        let mut seen = std::collections::HashSet::new();
        for inst in &instances {
            if !seen.insert(inst.context.instance_id.as_str()) {
                return Err(Error::Integrity(format!(
                    "duplicate instance id {}",
                    inst.context.instance_id
                )));
            }
        }
        Ok(Split { name, instances })
    }

    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }

    pub fn targets(&self) -> impl Iterator<Item = &Instance> {
        self.instances.iter().filter(|i| i.label.target)
    }

    /// Gold refs that do not resolve in `kb`.
    pub fn dangling_refs<'a>(&'a self, kb: &'a KnowledgeBase) -> Vec<(&'a str, &'a SnippetRef)> {
        self.instances
            .iter()
            .flat_map(|i| {
                i.label
                    .gold_snippets
                    .iter()
                    .filter(|r| !kb.contains(r))
                    .map(move |r| (i.context.instance_id.as_str(), r))
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builder_assigns_dense_ranges() {
        let mut b = KnowledgeBase::builder();
        b.entity(Domain::Hotel, "0", "Cityroomz").unwrap();
        b.review("0", [("0".to_string(), "a"), ("1".to_string(), "b"), ("2".to_string(), "c")])
            .unwrap();
        let kb = b.build();
        assert_eq!(kb.snippet_count(), 3);
        let key = kb.entities()[0].key();
        assert_eq!(kb.snippet_range(&key), 0..3);
        let refs: Vec<_> = kb.snippets().iter().map(|s| s.snippet_ref.to_string()).collect();
        assert_eq!(refs, ["hotel/0/0/0", "hotel/0/0/1", "hotel/0/0/2"]);
    }

    #[test]
    fn duplicate_entity_rejected() {
        let mut b = KnowledgeBase::builder();
        b.entity(Domain::Hotel, "0", "A").unwrap();
        assert!(matches!(
            b.entity(Domain::Hotel, "0", "B"),
            Err(Error::Integrity(_))
        ));
        // same id in another domain is fine
        b.entity(Domain::Restaurant, "0", "B").unwrap();
    }

    #[test]
    fn context_rules() {
        let ok = DialogueContext::new("x", [(Speaker::User, "hi"), (Speaker::System, "yo"), (Speaker::User, "wifi?")]);
        assert!(ok.is_ok());
        let ends_system = DialogueContext::new("x", [(Speaker::User, "hi"), (Speaker::System, "yo")]);
        assert!(matches!(ends_system, Err(Error::Precondition(_))));
        let tie = DialogueContext::new("x", [(Speaker::User, "hi"), (Speaker::User, "wifi?")]);
        assert!(matches!(tie, Err(Error::Integrity(_))));
        let blank = DialogueContext::new("x", [(Speaker::User, "  ")]);
        assert!(blank.is_err());
    }

    #[test]
    fn label_consistency() {
        assert!(InstanceLabel::negative().validate("x").is_ok());
        let bad = InstanceLabel {
            target: true,
            gold_snippets: BTreeSet::new(),
            reference_response: Some("r".into()),
        };
        assert!(bad.validate("x").is_err());
    }

    #[test]
    fn snippet_ref_order_is_lexicographic() {
        let a = SnippetRef::new(Domain::Hotel, "1", "0", "2");
        let b = SnippetRef::new(Domain::Hotel, "1", "0", "10");
        // string order, not numeric
        assert!(b < a);
        assert!(SnippetRef::new(Domain::Hotel, "9", "0", "0") < SnippetRef::new(Domain::Restaurant, "0", "0", "0"));
    }
}
