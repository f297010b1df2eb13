//! Calibration: selection thresholds and the detector, trained once and
//! written to an artifacts directory.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{Engine, PipelineConfig, StageSource};
use crate::corpus::{load_split, KnowledgeBase, Split, SplitName};
use crate::detect::{evaluate_detector, train_detector, DetectorConfig, LexicalDetectorModel};
use crate::error::{Error, Result};
use crate::metrics::ClassificationScores;
use crate::select::{calibrate_threshold, Calibration, LexicalKind, ScoredInstance};

pub const ARTIFACTS_FILE: &str = "artifacts.json";
const DETECTOR_FILE: &str = "detector.json";
const FORMAT: &str = "sktod-artifacts";
const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Thresholds {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tfidf: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bm25: Option<f64>,
    /// For an external scorer, calibrated outside this tool.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub external: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Artifacts {
    pub format: String,
    pub version: u32,
    pub seed: u64,
    /// Hash of the knowledge base the thresholds were fit on. The lexical
    /// index is rebuilt from the knowledge base at load time, so this is
    /// what ties the two together.
    pub kb_fingerprint: String,
    pub thresholds: Thresholds,
    /// Validation instance-level F1 at each threshold.
    pub validation_f1: Thresholds,
    pub detector: DetectorConfig,
    pub detector_validation: ClassificationScores,
}

impl Artifacts {
    pub fn save(&self, model: &LexicalDetectorModel, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        model.save(dir.join(DETECTOR_FILE))?;
        let path = dir.join(ARTIFACTS_FILE);
        let text = serde_json::to_string_pretty(self)? + "\n";
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<(Artifacts, LexicalDetectorModel)> {
        let dir = dir.as_ref();
        let path = dir.join(ARTIFACTS_FILE);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let artifacts: Artifacts = serde_json::from_str(&text)?;
        if artifacts.format != FORMAT || artifacts.version != VERSION {
            return Err(Error::Integrity(format!(
                "{}: unsupported artifacts {} v{}",
                path.display(),
                artifacts.format,
                artifacts.version
            )));
        }
        let model = LexicalDetectorModel::load(dir.join(DETECTOR_FILE))?;
        Ok((artifacts, model))
    }
}

/// FNV-1a over every entity and snippet, in knowledge base order.
pub fn kb_fingerprint(kb: &KnowledgeBase) -> String {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    let mut eat = |s: &str| {
        for &b in s.as_bytes().iter().chain(b"\x1f") {
            h ^= b as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
    };
    for e in kb.entities() {
        eat(e.domain.as_str());
        eat(&e.entity_id);
        eat(&e.name);
    }
    for s in kb.snippets() {
        eat(&s.snippet_ref.to_string());
        eat(&s.text);
    }
    format!("{h:016x}")
}

/// Ranks the gold entities' snippets for every target instance with the
/// scorer `config` selects.
pub fn calibration_instances(engine: &Engine, config: &PipelineConfig, split: &Split) -> Result<Vec<ScoredInstance>> {
    split
        .targets()
        .collect::<Vec<_>>()
        .par_iter()
        .map(|inst| {
            let entities: Vec<_> = inst.label.gold_entities().into_iter().collect();
            Ok(ScoredInstance {
                instance_id: inst.context.instance_id.clone(),
                ranked: engine.rank(config, &inst.context, &entities)?,
                gold: inst.label.gold_snippets.clone(),
            })
        })
        .collect()
}

/// Fits the threshold of the scorer `config` selects on `val` and installs
/// it in `engine`. Nothing is written to disk.
pub fn calibrate_selection(engine: &mut Engine, config: &PipelineConfig, val: &Split) -> Result<Calibration> {
    let c = calibrate_threshold(&calibration_instances(engine, config, val)?)?;
    let slot = match (config.ks, config.scorer) {
        (StageSource::External, _) => &mut engine.thresholds.external,
        (_, LexicalKind::Tfidf) => &mut engine.thresholds.tfidf,
        (_, LexicalKind::Bm25) => &mut engine.thresholds.bm25,
    };
    *slot = Some(c.threshold);
    Ok(c)
}

fn load_required(data_dir: &Path, name: SplitName) -> Result<Split> {
    let dir = data_dir.join(name.as_str());
    if !dir.is_dir() {
        return Err(Error::NotFound(format!("{} split at {}", name, dir.display())));
    }
    Ok(load_split(&dir, name)?.0)
}

/// Fits both lexical thresholds on the validation split and trains the
/// detector on train with early stopping on validation, then writes the
/// result to `out_dir`. Same data and seed give byte-identical files.
pub fn calibrate_all(
    engine: &mut Engine,
    data_dir: impl AsRef<Path>,
    out_dir: impl AsRef<Path>,
    seed: u64,
) -> Result<Artifacts> {
    let data_dir = data_dir.as_ref();
    let train = load_required(data_dir, SplitName::Train)?;
    let val = load_required(data_dir, SplitName::Val)?;
    let dangling = val.dangling_refs(&engine.kb).len() + train.dangling_refs(&engine.kb).len();
    if dangling > 0 {
        return Err(Error::Integrity(format!(
            "{dangling} gold snippets are missing from the knowledge base"
        )));
    }

    let mut thresholds = Thresholds::default();
    let mut validation_f1 = Thresholds::default();
    for kind in [LexicalKind::Tfidf, LexicalKind::Bm25] {
        let config = PipelineConfig {
            scorer: kind,
            ..PipelineConfig::default()
        };
        let c = calibrate_threshold(&calibration_instances(engine, &config, &val)?)?;
        log::info!("{kind:?}: threshold {:.6}, validation F1 {:.4}", c.threshold, c.f1);
        match kind {
            LexicalKind::Tfidf => {
                thresholds.tfidf = Some(c.threshold);
                validation_f1.tfidf = Some(c.f1);
            }
            LexicalKind::Bm25 => {
                thresholds.bm25 = Some(c.threshold);
                validation_f1.bm25 = Some(c.f1);
            }
        }
    }

    let config = DetectorConfig {
        seed,
        ..DetectorConfig::default()
    };
    let model = train_detector(&train, &val, &config)?;
    let artifacts = Artifacts {
        format: FORMAT.into(),
        version: VERSION,
        seed,
        kb_fingerprint: kb_fingerprint(&engine.kb),
        thresholds,
        validation_f1,
        detector_validation: evaluate_detector(&model, &val)?,
        detector: config,
    };
    artifacts.save(&model, out_dir)?;
    engine.thresholds = thresholds;
    engine.detector = Some(model);
    Ok(artifacts)
}
