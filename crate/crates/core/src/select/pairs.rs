use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::CandidateSet;
use crate::corpus::{KnowledgeBase, SnippetRef, Split};
use crate::error::{Error, Result};
use crate::external::{wire_context, WireTurn};

/// One (context, snippet, label) example for training a pairwise scorer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingPair {
    pub instance_id: String,
    pub context: Vec<WireTurn>,
    #[serde(rename = "ref")]
    pub snippet_ref: SnippetRef,
    pub snippet: String,
    pub label: bool,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct PairExport {
    pub pairs: Vec<TrainingPair>,
    pub positives: usize,
    pub negatives: usize,
    /// Instances that had fewer negatives available than positives.
    pub short_instances: Vec<String>,
}

/// Stable per-instance seed so that the export does not depend on the
/// iteration order of other instances.
fn instance_seed(seed: u64, index: usize) -> u64 {
    seed ^ (index as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Every gold snippet becomes a positive pair; for each instance the same
/// number of non-gold snippets of the gold entities are drawn uniformly
/// without replacement as negatives.
pub fn export_training_pairs(split: &Split, kb: &KnowledgeBase, seed: u64) -> Result<PairExport> {
    let mut out = PairExport::default();
    for (idx, inst) in split.instances.iter().enumerate() {
        if !inst.label.target {
            continue;
        }
        let gold = &inst.label.gold_snippets;
        let entities: Vec<_> = inst.label.gold_entities().into_iter().collect();
        let candidates = CandidateSet::for_entities(&inst.context.instance_id, kb, &entities);
        let context = wire_context(&inst.context);
        let mut push = |snippet_ref: &SnippetRef, label: bool| -> Result<()> {
            let snippet = kb.snippet(snippet_ref).ok_or_else(|| {
                Error::Integrity(format!("{}: gold snippet {snippet_ref} not in knowledge base", inst.context.instance_id))
            })?;
            out.pairs.push(TrainingPair {
                instance_id: inst.context.instance_id.clone(),
                context: context.clone(),
                snippet_ref: snippet_ref.clone(),
                snippet: snippet.text.clone(),
                label,
            });
            Ok(())
        };
        for r in gold {
            push(r, true)?;
        }
        let negatives: Vec<&SnippetRef> = candidates
            .candidates
            .iter()
            .map(|s| &s.snippet_ref)
            .filter(|r| !gold.contains(*r))
            .collect();
        if negatives.len() < gold.len() {
            log::warn!(
                "{}: only {} negatives for {} positives",
                inst.context.instance_id,
                negatives.len(),
                gold.len()
            );
            out.short_instances.push(inst.context.instance_id.clone());
        }
        let mut rng = ChaCha8Rng::seed_from_u64(instance_seed(seed, idx));
        let mut sampled: Vec<&SnippetRef> = negatives
            .choose_multiple(&mut rng, gold.len().min(negatives.len()))
            .copied()
            .collect();
        sampled.sort();
        for r in sampled {
            push(r, false)?;
        }
    }
    out.positives = out.pairs.iter().filter(|p| p.label).count();
    out.negatives = out.pairs.len() - out.positives;
    Ok(out)
}

/// One JSON object per line.
pub fn write_training_pairs(pairs: &[TrainingPair], mut w: impl Write) -> Result<()> {
    for p in pairs {
        serde_json::to_writer(&mut w, p)?;
        w.write_all(b"\n").map_err(|e| Error::io("<pairs>", e))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{DialogueContext, Domain, Instance, InstanceLabel, Speaker, SplitName};

    fn fixture() -> (Split, KnowledgeBase) {
        let mut b = KnowledgeBase::builder();
        b.entity(Domain::Hotel, "0", "Cityroomz").unwrap();
        b.review("0", (0..6).map(|i| (i.to_string(), format!("sentence {i}")))).unwrap();
        b.review("1", (0..4).map(|i| (i.to_string(), format!("more {i}")))).unwrap();
        let kb = b.build();
        let gold = (0..4).map(|i| SnippetRef::new(Domain::Hotel, "0", "0", i.to_string())).collect();
        let inst = Instance {
            context: DialogueContext::new("train-00000", [(Speaker::User, "wifi?")]).unwrap(),
            label: InstanceLabel { target: true, gold_snippets: gold, reference_response: Some("ok".into()) },
        };
        (Split::new(SplitName::Train, vec![inst]).unwrap(), kb)
    }

    #[test]
    fn balanced_pairs() {
        let (split, kb) = fixture();
        let e = export_training_pairs(&split, &kb, 7).unwrap();
        assert_eq!((e.positives, e.negatives), (4, 4));
        assert!(e.short_instances.is_empty());
        for p in e.pairs.iter().filter(|p| !p.label) {
            assert!(!split.instances[0].label.gold_snippets.contains(&p.snippet_ref));
        }
    }

    #[test]
    fn deterministic_bytes() {
        let (split, kb) = fixture();
        let dump = |seed| {
            let mut buf = Vec::new();
            write_training_pairs(&export_training_pairs(&split, &kb, seed).unwrap().pairs, &mut buf).unwrap();
            buf
        };
        assert_eq!(dump(3), dump(3));
    }

    #[test]
    fn short_on_negatives() {
        let mut b = KnowledgeBase::builder();
        b.entity(Domain::Hotel, "0", "Tiny").unwrap();
        b.review("0", (0..3).map(|i| (i.to_string(), format!("s{i}")))).unwrap();
        let kb = b.build();
        let gold = (0..2).map(|i| SnippetRef::new(Domain::Hotel, "0", "0", i.to_string())).collect();
        let inst = Instance {
            context: DialogueContext::new("x", [(Speaker::User, "q")]).unwrap(),
            label: InstanceLabel { target: true, gold_snippets: gold, reference_response: Some("r".into()) },
        };
        let split = Split::new(SplitName::Train, vec![inst]).unwrap();
        let e = export_training_pairs(&split, &kb, 1).unwrap();
        assert_eq!((e.positives, e.negatives), (2, 1));
        assert_eq!(e.short_instances, ["x"]);
    }
}
