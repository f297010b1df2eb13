//! Entity tracking by fuzzy n-gram matching of normalized entity names.
//!
//! Every dialogue turn is normalized the same way as entity names. For each
//! name variant of `n` tokens, every `n`-token window of the turn is compared
//! with the variant by the character-level ratio `2·LCS / (|a| + |b|)`, and a
//! window scoring at least [`MATCH_THRESHOLD`] is a mention. The tracked
//! entities are those mentioned in the latest turn that mentions any entity.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::corpus::{DialogueContext, Domain, Entity, EntityKey, KnowledgeBase};

pub const MATCH_THRESHOLD: f64 = 0.95;

/// Bumped whenever the normalization rules change, so that tracking accuracy
/// shifts can be attributed.
pub const NORMALIZATION_VERSION: u32 = 1;

/// Type words that users often leave out ("the Gonville" for "Gonville Hotel").
const TYPE_SUFFIXES: &[&[&str]] = &[
    &["guest", "house"],
    &["guesthouse"],
    &["hotel"],
    &["restaurant"],
];

/// A stripped variant made only of these words would match ordinary
/// conversation, so it is not used.
const GENERIC_WORDS: &[&str] = &[
    "a", "an", "and", "the", "of", "city", "centre", "center", "north", "south", "east", "west",
    "cambridge", "house", "one", "two", "bar", "kitchen", "cafe", "place", "inn", "lodge", "b",
];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NormalizedName {
    pub original: String,
    pub normalized: String,
    pub token_count: usize,
    /// `normalized` first, then suffix-stripped or respelled forms.
    pub variants: Vec<String>,
}

/// Lowercase, `&` → `and`, apostrophes dropped, other punctuation → space,
/// whitespace collapsed.
pub fn normalize_text(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    for c in text.chars().flat_map(char::to_lowercase) {
        match c {
            '\'' | '\u{2019}' | '\u{2018}' => {}
            '&' => out.push_str(" and "),
            c if c.is_alphanumeric() => out.push(c),
            _ => out.push(' '),
        }
    }
    out.split_whitespace().collect::<Vec<_>>().join(" ")
}

pub fn normalize_name(name: &str) -> NormalizedName {
    let text = normalize_text(name);
    let mut tokens: Vec<&str> = text.split_whitespace().collect();
    while tokens.len() > 1 && tokens[0] == "the" {
        tokens.remove(0);
    }
    let normalized = tokens.join(" ");

    let mut variants = vec![normalized.clone()];
    let mut push = |v: String| {
        if !variants.contains(&v) {
            variants.push(v);
        }
    };
    for suffix in TYPE_SUFFIXES {
        if tokens.len() > suffix.len() && tokens.ends_with(suffix) {
            let stem = &tokens[..tokens.len() - suffix.len()];
            let informative = stem.iter().any(|t| !GENERIC_WORDS.contains(t));
            if informative && stem.join(" ").chars().count() >= 3 {
                push(stem.join(" "));
            }
            if *suffix == ["guest", "house"] {
                push(format!("{} guesthouse", stem.join(" ")));
            } else if *suffix == ["guesthouse"] {
                push(format!("{} guest house", stem.join(" ")));
            }
        }
    }
    NormalizedName {
        original: name.to_string(),
        token_count: tokens.len(),
        normalized,
        variants,
    }
}

fn lcs_chars(a: &[char], b: &[char]) -> usize {
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

fn ratio(a: &[char], b: &[char]) -> f64 {
    if a.is_empty() && b.is_empty() {
        return 1.0;
    }
    2.0 * lcs_chars(a, b) as f64 / (a.len() + b.len()) as f64
}

/// `2·LCS / (|a| + |b|)` over the characters of the space-joined token
/// sequences. Symmetric; 1 exactly when the joined strings are equal.
pub fn ngram_match_score<S: AsRef<str>>(a: &[S], b: &[S]) -> f64 {
    let join = |t: &[S]| -> Vec<char> {
        t.iter()
            .map(AsRef::as_ref)
            .collect::<Vec<_>>()
            .join(" ")
            .chars()
            .collect()
    };
    ratio(&join(a), &join(b))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntityMatch {
    pub entity: EntityKey,
    pub turn_index: usize,
    /// Token offset of the earliest qualifying window in the turn.
    pub offset: usize,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Tracking {
    /// Entities of the latest turn with any mention, in knowledge-base order.
    pub entities: Vec<EntityKey>,
    pub turn_index: Option<usize>,
    /// Best-scoring mention of each entity in each turn.
    pub matches: Vec<EntityMatch>,
}

impl Tracking {
    /// Entities in order of their first mention in the dialogue.
    pub fn first_mention_order(&self) -> Vec<EntityKey> {
        let mut first: BTreeMap<&EntityKey, (usize, usize)> = BTreeMap::new();
        for m in &self.matches {
            let at = (m.turn_index, m.offset);
            let t = first.entry(&m.entity).or_insert(at);
            *t = (*t).min(at);
        }
        let mut order: Vec<((usize, usize), &EntityKey)> = first.into_iter().map(|(k, t)| (t, k)).collect();
        order.sort();
        order.into_iter().map(|(_, k)| k.clone()).collect()
    }
}

struct Variant {
    entity: usize,
    token_count: usize,
    chars: Vec<char>,
    bag: HashMap<char, u16>,
}

fn char_bag(chars: &[char]) -> HashMap<char, u16> {
    let mut bag = HashMap::new();
    for &c in chars {
        *bag.entry(c).or_insert(0) += 1;
    }
    bag
}

/// Precomputed name variants for a knowledge base.
pub struct EntityTracker {
    keys: Vec<EntityKey>,
    names: Vec<NormalizedName>,
    variants: Vec<Variant>,
    threshold: f64,
}

/// Characters of a token window and their multiset.
type Window = (Vec<char>, HashMap<char, u16>);

impl EntityTracker {
    pub fn new(kb: &KnowledgeBase) -> Self {
        Self::from_entities(kb.entities().iter())
    }

    /// A tracker that only knows the given entities.
    pub fn for_keys(kb: &KnowledgeBase, keys: &[EntityKey]) -> Self {
        Self::from_entities(keys.iter().filter_map(|k| kb.entity(k)))
    }

    fn from_entities<'a>(entities: impl Iterator<Item = &'a Entity>) -> Self {
        let entities: Vec<&Entity> = entities.collect();
        let keys: Vec<EntityKey> = entities.iter().map(|e| e.key()).collect();
        let names: Vec<NormalizedName> = entities.iter().map(|e| normalize_name(&e.name)).collect();
        let variants = names
            .iter()
            .enumerate()
            .flat_map(|(entity, n)| {
                n.variants.iter().map(move |v| {
                    let chars: Vec<char> = v.chars().collect();
                    Variant {
                        entity,
                        token_count: v.split_whitespace().count(),
                        bag: char_bag(&chars),
                        chars,
                    }
                })
            })
            .collect();
        EntityTracker {
            keys,
            names,
            variants,
            threshold: MATCH_THRESHOLD,
        }
    }

    pub fn with_threshold(mut self, threshold: f64) -> Self {
        self.threshold = threshold;
        self
    }

    pub fn names(&self) -> impl Iterator<Item = (&EntityKey, &NormalizedName)> {
        self.keys.iter().zip(&self.names)
    }

    /// Best score of each entity within one text, for entities at or above
    /// the threshold, with the token offset of its earliest match.
    pub fn match_text(&self, text: &str) -> BTreeMap<usize, (f64, usize)> {
        let norm = normalize_text(text);
        let tokens: Vec<&str> = norm.split_whitespace().collect();
        let mut best: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
        let mut windows: HashMap<usize, Vec<Window>> = HashMap::new();
        for v in &self.variants {
            if v.token_count == 0 || v.token_count > tokens.len() {
                continue;
            }
            let grams = windows.entry(v.token_count).or_insert_with(|| {
                tokens
                    .windows(v.token_count)
                    .map(|w| {
                        let chars: Vec<char> = w.join(" ").chars().collect();
                        let bag = char_bag(&chars);
                        (chars, bag)
                    })
                    .collect()
            });
            for (offset, (chars, bag)) in grams.iter().enumerate() {
                let total = (chars.len() + v.chars.len()) as f64;
                let shorter = chars.len().min(v.chars.len()) as f64;
                if 2.0 * shorter / total < self.threshold {
                    continue;
                }
                let common: usize = v
                    .bag
                    .iter()
                    .map(|(c, &n)| n.min(bag.get(c).copied().unwrap_or(0)) as usize)
                    .sum();
                if 2.0 * common as f64 / total < self.threshold {
                    continue;
                }
                let score = ratio(chars, &v.chars);
                if score >= self.threshold {
                    let e = best.entry(v.entity).or_insert((score, offset));
                    *e = (e.0.max(score), e.1.min(offset));
                }
            }
        }
        best
    }

    pub fn track(&self, context: &DialogueContext) -> Tracking {
        let mut matches = Vec::new();
        let mut latest: Option<(usize, Vec<usize>)> = None;
        for u in &context.utterances {
            let found = self.match_text(&u.text);
            if found.is_empty() {
                continue;
            }
            for (&e, &(score, offset)) in &found {
                matches.push(EntityMatch {
                    entity: self.keys[e].clone(),
                    turn_index: u.turn_index,
                    offset,
                    score,
                });
            }
            latest = Some((u.turn_index, found.keys().copied().collect()));
        }
        match latest {
            Some((turn, entities)) => Tracking {
                entities: entities.into_iter().map(|e| self.keys[e].clone()).collect(),
                turn_index: Some(turn),
                matches,
            },
            None => Tracking::default(),
        }
    }

    /// [`track`](Self::track), falling back to every entity of the inferred
    /// domain (or of all domains) when nothing matched, so that knowledge
    /// selection always has candidates.
    pub fn track_with_fallback(&self, context: &DialogueContext, domain: Option<Domain>) -> Tracking {
        let tracked = self.track(context);
        if !tracked.entities.is_empty() {
            return tracked;
        }
        let domain = domain.or_else(|| infer_domain(context));
        Tracking {
            entities: self
                .keys
                .iter()
                .filter(|k| domain.is_none_or(|d| k.domain == d))
                .cloned()
                .collect(),
            turn_index: None,
            matches: tracked.matches,
        }
    }
}

const HOTEL_CUES: &[&str] = &[
    "hotel", "hotels", "guesthouse", "guesthouses", "room", "rooms", "stay", "night", "nights",
    "parking", "wifi", "internet", "bed", "beds", "breakfast", "check", "lodge",
];
const RESTAURANT_CUES: &[&str] = &[
    "restaurant", "restaurants", "food", "eat", "dine", "dinner", "lunch", "table", "menu",
    "cuisine", "dish", "dishes", "meal", "waiter", "serve", "serves",
];

/// Guesses the dialogue's domain from cue words; `None` on a tie.
pub fn infer_domain(context: &DialogueContext) -> Option<Domain> {
    let (mut hotel, mut restaurant) = (0usize, 0usize);
    for u in &context.utterances {
        for t in normalize_text(&u.text).split_whitespace() {
            hotel += HOTEL_CUES.contains(&t) as usize;
            restaurant += RESTAURANT_CUES.contains(&t) as usize;
        }
    }
    match hotel.cmp(&restaurant) {
        std::cmp::Ordering::Greater => Some(Domain::Hotel),
        std::cmp::Ordering::Less => Some(Domain::Restaurant),
        std::cmp::Ordering::Equal => None,
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrackingScores {
    /// Fraction of instances whose predicted set equals the gold set.
    pub accuracy: f64,
    /// Fraction of instances missing at least one gold entity.
    pub missing_rate: f64,
    /// Fraction of instances with at least one spurious entity.
    pub spurious_rate: f64,
    pub instances: usize,
}

pub fn evaluate_tracking(
    predictions: &[BTreeSet<EntityKey>],
    gold: &[BTreeSet<EntityKey>],
) -> TrackingScores {
    assert_eq!(predictions.len(), gold.len(), "predictions and gold must align");
    let n = gold.len();
    let (mut exact, mut missing, mut spurious) = (0usize, 0usize, 0usize);
    for (p, g) in predictions.iter().zip(gold) {
        exact += (p == g) as usize;
        missing += (!g.is_subset(p)) as usize;
        spurious += (!p.is_subset(g)) as usize;
    }
    let rate = |x: usize| if n == 0 { 0.0 } else { x as f64 / n as f64 };
    TrackingScores {
        accuracy: rate(exact),
        missing_rate: rate(missing),
        spurious_rate: rate(spurious),
        instances: n,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{KnowledgeBase, Speaker};
    use proptest::prelude::*;

    fn kb() -> KnowledgeBase {
        let mut b = KnowledgeBase::builder();
        for (id, name) in [
            ("0", "Cityroomz"),
            ("1", "The Gonville Hotel"),
            ("2", "Acorn Guest House"),
            ("3", "A and B Guest House"),
        ] {
            b.entity(Domain::Hotel, id, name).unwrap();
        }
        b.entity(Domain::Restaurant, "0", "The Copper Kettle").unwrap();
        b.build()
    }

    fn ctx(turns: &[&str]) -> DialogueContext {
        let speakers = [Speaker::User, Speaker::System];
        DialogueContext::new(
            "t",
            turns.iter().enumerate().map(|(i, t)| (speakers[i % 2], *t)),
        )
        .unwrap()
    }

    fn ids(t: &Tracking) -> Vec<String> {
        t.entities.iter().map(|k| k.to_string()).collect()
    }

    #[test]
    fn gonville_variants() {
        let n = normalize_name("The Gonville Hotel");
        assert_eq!(n.normalized, "gonville hotel");
        assert_eq!(n.variants, ["gonville hotel", "gonville"]);
        assert_eq!(normalize_name("Cityroomz").variants, ["cityroomz"]);
    }

    #[test]
    fn guest_house_spellings() {
        let n = normalize_name("Acorn Guest House");
        assert_eq!(n.variants, ["acorn guest house", "acorn", "acorn guesthouse"]);
        // "a and b" is all generic words, so it is not a variant on its own
        let n = normalize_name("A and B Guest House");
        assert_eq!(n.variants, ["a and b guest house", "a and b guesthouse"]);
    }

    #[test]
    fn normalization_is_idempotent_for_leading_articles() {
        for name in ["The The Hotel", "The", "Rosa's Bed & Breakfast", "the  COPPER   kettle"] {
            let once = normalize_name(name).normalized;
            assert_eq!(normalize_name(&once).normalized, once, "{name}");
        }
    }

    #[test]
    fn score_examples() {
        assert_eq!(ngram_match_score(&["cityroomz"], &["cityroomz"]), 1.0);
        assert!((ngram_match_score(&["gonville"], &["gonvile"]) - 14.0 / 15.0).abs() < 1e-12);
        assert_eq!(ngram_match_score(&["abc"], &["xyz"]), 0.0);
    }

    #[test]
    fn water_pressure_dialogue() {
        let c = ctx(&[
            "Are there any hotels (not guesthouses) that have 0 stars?",
            "Yes, actually. Cityroomz is a moderately priced 0 star hotel.",
            "Do they have free wifi?",
            "Yes, they do have free wifi! Would you like me to book a stay for you?",
            "Does the Cityroomz have strong water pressure in the shower?",
        ]);
        let t = EntityTracker::new(&kb()).track(&c);
        assert_eq!(ids(&t), ["hotel/0"]);
        assert_eq!(t.turn_index, Some(4));
    }

    #[test]
    fn two_hotels_in_last_turn() {
        let c = ctx(&["Which has better wifi, the Gonville or the Acorn Guest House?"]);
        let t = EntityTracker::new(&kb()).track(&c);
        assert_eq!(ids(&t), ["hotel/1", "hotel/2"]);
    }

    #[test]
    fn no_mention() {
        let c = ctx(&["I need a place to stay with free parking."]);
        let tracker = EntityTracker::new(&kb());
        assert!(tracker.track(&c).entities.is_empty());
        let fb = tracker.track_with_fallback(&c, None);
        assert_eq!(fb.entities.len(), 4, "falls back to the hotel domain");
    }

    #[test]
    fn misspelling_within_threshold() {
        // 12 of 13 characters in common: 24/25 = 0.96
        let c = ctx(&["is the copper ketle any good?"]);
        let t = EntityTracker::new(&kb()).track(&c);
        assert_eq!(ids(&t), ["restaurant/0"]);
    }

    #[test]
    fn latest_turn_wins() {
        let tracker = EntityTracker::new(&kb());
        let c = ctx(&["Tell me about Cityroomz", "Sure.", "What about the Gonville Hotel?"]);
        let t = tracker.track(&c);
        assert_eq!(ids(&t), ["hotel/1"]);
        assert_eq!(t.first_mention_order().len(), 2);
        assert_eq!(t.first_mention_order()[0].to_string(), "hotel/0");
    }

    #[test]
    fn tracking_scores() {
        let k = |s: &str| EntityKey { domain: Domain::Hotel, entity_id: s.into() };
        let gold = vec![BTreeSet::from([k("1")]), BTreeSet::from([k("2")])];
        let pred = vec![BTreeSet::from([k("1")]), BTreeSet::from([k("2"), k("3")])];
        let s = evaluate_tracking(&pred, &gold);
        assert_eq!((s.accuracy, s.spurious_rate, s.missing_rate), (0.5, 0.5, 0.0));
        assert_eq!(evaluate_tracking(&gold, &gold).accuracy, 1.0);
    }

    proptest! {
        #[test]
        fn score_bounds_and_symmetry(a in "[a-e ]{1,12}", b in "[a-e ]{1,12}") {
            let (a, b) = ([a.as_str()], [b.as_str()]);
            let s = ngram_match_score(&a, &b);
            prop_assert!((0.0..=1.0).contains(&s));
            prop_assert_eq!(s, ngram_match_score(&b, &a));
            prop_assert_eq!(s == 1.0, a == b);
        }

        #[test]
        fn appended_mention_dominates(prefix in "[a-z ]{0,30}") {
            let tracker = EntityTracker::new(&kb());
            let c = ctx(&[&format!("x {prefix}"), "ok", "Is the Gonville Hotel quiet?"]);
            let t = tracker.track(&c);
            prop_assert_eq!(ids(&t), vec!["hotel/1".to_string()]);
        }
    }
}
