//! Reading and writing the three-file dataset layout.
//!
//! Adapter rules for label knowledge items:
//! - `entity_id`, `doc_id` and `sent_id` may be JSON numbers or strings;
//! - `review_doc_id` / `review_sent_id` are accepted as aliases;
//! - items with a `doc_type` other than `"review"` (for example FAQ entries)
//!   are not review sentences and are dropped; the count is reported in
//!   [`LoadReport`]. A target instance left without any review snippet after
//!   this is dropped from the split and counted as well.
//! - JSON objects are read in file order and duplicate keys are rejected.

use std::collections::BTreeSet;
use std::fmt;
use std::marker::PhantomData;
use std::path::{Path, PathBuf};

use serde::de::{self, Deserializer, MapAccess, Visitor};
use serde::ser::{SerializeMap, Serializer};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::{
    DialogueContext, Domain, Instance, InstanceLabel, KnowledgeBase, Speaker, Split, SplitName,
    Utterance,
};
use crate::error::{Error, Result};

/// Object entries in file order; duplicate keys are a hard error.
struct Entries<T>(Vec<(String, T)>);

impl<'de, T: Deserialize<'de>> Deserialize<'de> for Entries<T> {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        struct V<T>(PhantomData<T>);
        impl<'de, T: Deserialize<'de>> Visitor<'de> for V<T> {
            type Value = Entries<T>;
            fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
                f.write_str("a JSON object")
            }
            fn visit_map<A: MapAccess<'de>>(self, mut map: A) -> std::result::Result<Self::Value, A::Error> {
                let mut out: Vec<(String, T)> = Vec::new();
                let mut seen = std::collections::HashSet::new();
                while let Some((k, v)) = map.next_entry::<String, T>()? {
                    if !seen.insert(k.clone()) {
                        return Err(de::Error::custom(format!("duplicate key {k:?}")));
                    }
                    out.push((k, v));
                }
                Ok(Entries(out))
            }
        }
        d.deserialize_map(V(PhantomData))
    }
}

struct OrderedMap<'a, T>(&'a [(String, T)]);

impl<T: Serialize> Serialize for OrderedMap<'_, T> {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let mut map = s.serialize_map(Some(self.0.len()))?;
        for (k, v) in self.0 {
            map.serialize_entry(k, v)?;
        }
        map.end()
    }
}

#[derive(Deserialize)]
struct RawReview {
    sentences: Entries<String>,
}

#[derive(Deserialize)]
struct RawEntity {
    name: String,
    #[serde(default)]
    reviews: Option<Entries<RawReview>>,
}

fn parse_error(path: &Path, text: &str, err: &serde_json::Error) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        offset: byte_offset(text, err.line(), err.column()),
        message: err.to_string(),
    }
}

/// serde_json reports 1-based line and column; convert to a byte offset.
fn byte_offset(text: &str, line: usize, column: usize) -> usize {
    if line == 0 {
        return 0;
    }
    let line_start: usize = text
        .split_inclusive('\n')
        .take(line - 1)
        .map(str::len)
        .sum();
    (line_start + column.saturating_sub(1)).min(text.len())
}

fn read(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn parse<T: for<'de> Deserialize<'de>>(path: &Path, text: &str) -> Result<T> {
    serde_json::from_str(text).map_err(|e| parse_error(path, text, &e))
}

/// Loads `knowledge.json`. `path` may be the file or the directory holding it.
pub fn load_knowledge_base(path: impl AsRef<Path>) -> Result<KnowledgeBase> {
    let path = resolve(path.as_ref(), "knowledge.json");
    let text = read(&path)?;
    parse_knowledge(&path, &text)
}

pub(crate) fn parse_knowledge(path: &Path, text: &str) -> Result<KnowledgeBase> {
    let raw: Entries<Entries<RawEntity>> = parse(path, text)?;
    let mut builder = KnowledgeBase::builder();
    for (domain_name, entities) in raw.0 {
        let domain = Domain::parse(&domain_name)
            .ok_or_else(|| Error::Integrity(format!("unknown domain {domain_name:?}")))?;
        for (entity_id, entity) in entities.0 {
            builder.entity(domain, entity_id, entity.name)?;
            for (review_id, review) in entity.reviews.map(|r| r.0).unwrap_or_default() {
                builder.review(review_id, review.sentences.0)?;
            }
        }
    }
    Ok(builder.build())
}

fn resolve(path: &Path, file: &str) -> PathBuf {
    if path.is_dir() {
        path.join(file)
    } else {
        path.to_path_buf()
    }
}

pub fn write_knowledge_base(kb: &KnowledgeBase, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let text = serde_json::to_string_pretty(&knowledge_json(kb))?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn knowledge_json(kb: &KnowledgeBase) -> Value {
    let mut domains: Vec<(String, Vec<(String, Value)>)> = Vec::new();
    for (i, entity) in kb.entities.iter().enumerate() {
        let reviews: Vec<(String, Value)> = kb.reviews[i]
            .iter()
            .map(|r| {
                let sentences: Vec<(String, &str)> = kb.snippets[r.sentences.clone()]
                    .iter()
                    .map(|s| (s.snippet_ref.sentence_id.clone(), s.text.as_str()))
                    .collect();
                let value = serde_json::json!({ "sentences": OrderedMap(&sentences) });
                (r.review_id.clone(), value)
            })
            .collect();
        let value = serde_json::json!({ "name": entity.name, "reviews": OrderedMap(&reviews) });
        let domain = entity.domain.as_str().to_string();
        match domains.iter_mut().find(|(d, _)| *d == domain) {
            Some((_, list)) => list.push((entity.entity_id.clone(), value)),
            None => domains.push((domain, vec![(entity.entity_id.clone(), value)])),
        }
    }
    let domains: Vec<(String, Value)> = domains
        .into_iter()
        .map(|(d, list)| (d, serde_json::to_value(OrderedMap(&list)).expect("plain json")))
        .collect();
    serde_json::to_value(OrderedMap(&domains)).expect("plain json")
}

#[derive(Debug, Serialize, Deserialize)]
struct RawTurn {
    speaker: Speaker,
    text: String,
}

#[derive(Debug, Default, Serialize, Deserialize)]
struct RawLabel {
    target: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    knowledge: Option<Vec<Value>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    response: Option<String>,
}

/// What the loader had to adapt while reading a split.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct LoadReport {
    pub non_review_items_dropped: usize,
    pub instances_dropped: usize,
}

fn id_string(v: Option<&Value>, field: &str) -> Result<String> {
    match v {
        Some(Value::String(s)) => Ok(s.clone()),
        Some(Value::Number(n)) => Ok(n.to_string()),
        _ => Err(Error::Integrity(format!("knowledge item missing {field}"))),
    }
}

/// Parses one label knowledge item. `Ok(None)` means "not a review sentence".
pub(crate) fn parse_knowledge_item(item: &Value) -> Result<Option<super::SnippetRef>> {
    let obj = item
        .as_object()
        .ok_or_else(|| Error::Integrity("knowledge item is not an object".into()))?;
    if let Some(doc_type) = obj.get("doc_type").and_then(Value::as_str) {
        if doc_type != "review" {
            return Ok(None);
        }
    }
    let domain_name = obj
        .get("domain")
        .and_then(Value::as_str)
        .ok_or_else(|| Error::Integrity("knowledge item missing domain".into()))?;
    let domain = Domain::parse(domain_name)
        .ok_or_else(|| Error::Integrity(format!("unknown domain {domain_name:?}")))?;
    let entity_id = id_string(obj.get("entity_id"), "entity_id")?;
    let review_id = id_string(obj.get("doc_id").or_else(|| obj.get("review_doc_id")), "doc_id")?;
    let sentence_id = id_string(obj.get("sent_id").or_else(|| obj.get("review_sent_id")), "sent_id")?;
    Ok(Some(super::SnippetRef {
        domain,
        entity_id,
        review_id,
        sentence_id,
    }))
}

/// Loads `<dir>/logs.json` and `<dir>/labels.json`. `path` may be the data
/// directory (the split name is appended) or the split directory itself.
pub fn load_split(path: impl AsRef<Path>, name: SplitName) -> Result<(Split, LoadReport)> {
    let path = path.as_ref();
    let dir = if path.join(name.as_str()).is_dir() {
        path.join(name.as_str())
    } else {
        path.to_path_buf()
    };
    let logs_path = dir.join("logs.json");
    let labels_path = dir.join("labels.json");
    let logs: Vec<Vec<RawTurn>> = parse(&logs_path, &read(&logs_path)?)?;
    let labels: Vec<RawLabel> = parse(&labels_path, &read(&labels_path)?)?;
    if logs.len() != labels.len() {
        return Err(Error::Alignment {
            logs: logs.len(),
            labels: labels.len(),
        });
    }

    let mut report = LoadReport::default();
    let mut instances = Vec::with_capacity(logs.len());
    for (idx, (turns, raw)) in logs.into_iter().zip(labels).enumerate() {
        let instance_id = format!("{name}-{idx:05}");
        let context = DialogueContext {
            utterances: turns
                .into_iter()
                .enumerate()
                .map(|(turn_index, t)| Utterance {
                    speaker: t.speaker,
                    text: t.text,
                    turn_index,
                })
                .collect(),
            instance_id,
        };
        context.validate()?;

        let mut gold = BTreeSet::new();
        for item in raw.knowledge.iter().flatten() {
            match parse_knowledge_item(item)? {
                Some(r) => {
                    if !gold.insert(r) {
                        return Err(Error::Integrity(format!(
                            "{}: duplicate gold snippet",
                            context.instance_id
                        )));
                    }
                }
                None => report.non_review_items_dropped += 1,
            }
        }
        if raw.target && gold.is_empty() && raw.knowledge.as_ref().is_some_and(|k| !k.is_empty()) {
            log::warn!("{}: target instance has no review snippets; dropped", context.instance_id);
            report.instances_dropped += 1;
            continue;
        }
        let label = InstanceLabel {
            target: raw.target,
            gold_snippets: gold,
            reference_response: if raw.target { raw.response } else { None },
        };
        label.validate(&context.instance_id)?;
        instances.push(Instance { context, label });
    }
    if report != LoadReport::default() {
        log::warn!("{name}: {report:?}");
    }
    Ok((Split::new(name, instances)?, report))
}

/// Writes a split in the layout [`load_split`] reads, into `dir`.
pub fn write_split(split: &Split, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let logs: Vec<Vec<RawTurn>> = split
        .instances
        .iter()
        .map(|i| {
            i.context
                .utterances
                .iter()
                .map(|u| RawTurn {
                    speaker: u.speaker,
                    text: u.text.clone(),
                })
                .collect()
        })
        .collect();
    let labels: Vec<RawLabel> = split
        .instances
        .iter()
        .map(|i| RawLabel {
            target: i.label.target,
            knowledge: i.label.target.then(|| {
                i.label
                    .gold_snippets
                    .iter()
                    .map(|r| {
                        serde_json::json!({
                            "domain": r.domain,
                            "entity_id": r.entity_id,
                            "doc_type": "review",
                            "doc_id": r.review_id,
                            "sent_id": r.sentence_id,
                        })
                    })
                    .collect()
            }),
            response: i.label.reference_response.clone(),
        })
        .collect();
    for (file, value) in [
        ("logs.json", serde_json::to_string_pretty(&logs)?),
        ("labels.json", serde_json::to_string_pretty(&labels)?),
    ] {
        let p = dir.join(file);
        std::fs::write(&p, value).map_err(|e| Error::io(&p, e))?;
    }
    Ok(())
}
