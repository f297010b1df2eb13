//! Pipeline orchestration: batch runs over a split, ablation presets,
//! calibration artifacts and interactive sessions.

mod artifacts;
mod session;

use std::collections::BTreeSet;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::absa::{external_tag, tag_snippet, SentimentAnnotation, SentimentLexicon};
use crate::corpus::{DialogueContext, EntityKey, Instance, KnowledgeBase, SnippetRef, Split};
use crate::detect::{detect, external_detect, DetectionScore, LexicalDetectorModel};
use crate::error::{Error, Result};
use crate::external::{AbsaClient, EndpointConfig, ExternalScorer, GeneratorClient, ScorerClient};
use crate::generate::{
    build_generation_input, external_generate, generate_ext, generate_template, index_annotations, Provenance,
    Response, EMPTY_RESPONSE,
};
use crate::metrics::{full_report, EvalReport, GenerationInputs, ReportInputs, SelectionInputs};
use crate::select::{
    score_candidates, select_from_ranked, CandidateSet, LexicalIndex, LexicalKind, LexicalScorer, ScoredSnippet,
    SnippetSelection,
};
use crate::track::{evaluate_tracking, EntityTracker};

pub use artifacts::{calibrate_all, calibrate_selection, calibration_instances, kb_fingerprint, Artifacts, Thresholds, ARTIFACTS_FILE};
pub use session::{
    EntityView, Grounded, SessionStore, SessionView, TurnResult, DEFAULT_TTL, NON_KNOWLEDGE_REPLY,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StageSource {
    Gold,
    Native,
    External,
}

/// Pipeline stages in execution order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Ktd,
    Et,
    Ks,
    Rg,
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Stage::Ktd => "ktd",
            Stage::Et => "et",
            Stage::Ks => "ks",
            Stage::Rg => "rg",
        })
    }
}

/// Native response generator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RgMode {
    Ext,
    Template,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExternalConfig {
    pub scorer: Option<EndpointConfig>,
    pub absa: Option<EndpointConfig>,
    pub generator: Option<EndpointConfig>,
    /// Use the lexicon tagger when the ABSA service is unreachable.
    pub absa_fallback: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub ktd: StageSource,
    pub et: StageSource,
    pub ks: StageSource,
    pub rg: StageSource,
    /// Lexical scorer for native selection.
    pub scorer: LexicalKind,
    pub rg_mode: RgMode,
    /// Sentiment tags from the ABSA service instead of the lexicon.
    pub external_absa: bool,
    /// Append sentiment phrases to snippets sent to an external generator.
    pub use_absa: bool,
    /// Selection threshold; when absent the calibrated one is used.
    pub threshold: Option<f64>,
    pub seed: u64,
    /// Keep every candidate's score in the per-instance output.
    pub keep_ranking: bool,
    /// Worker threads for batch runs; all cores when absent.
    pub workers: Option<usize>,
    /// Last stage to run.
    pub until: Stage,
    pub external: ExternalConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            ktd: StageSource::Native,
            et: StageSource::Native,
            ks: StageSource::Native,
            rg: StageSource::Native,
            scorer: LexicalKind::Tfidf,
            rg_mode: RgMode::Template,
            external_absa: false,
            use_absa: false,
            threshold: None,
            seed: 0,
            keep_ranking: true,
            workers: None,
            until: Stage::Rg,
            external: ExternalConfig::default(),
        }
    }
}

/// The end-to-end rows of the ablation table.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Ablation {
    /// Gold detection and entities, predicted selection.
    Ks,
    /// Gold detection, predicted entities and selection.
    EtKs,
    /// Everything predicted.
    KtdEtKs,
}

impl Ablation {
    pub const ALL: [Ablation; 3] = [Ablation::Ks, Ablation::EtKs, Ablation::KtdEtKs];

    pub fn label(self) -> &'static str {
        match self {
            Ablation::Ks => "+KS",
            Ablation::EtKs => "+ET+KS",
            Ablation::KtdEtKs => "+KTD+ET+KS",
        }
    }
}

impl PipelineConfig {
    pub fn ablation(row: Ablation) -> Self {
        let (ktd, et) = match row {
            Ablation::Ks => (StageSource::Gold, StageSource::Gold),
            Ablation::EtKs => (StageSource::Gold, StageSource::Native),
            Ablation::KtdEtKs => (StageSource::Native, StageSource::Native),
        };
        PipelineConfig {
            ktd,
            et,
            ..PipelineConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.rg == StageSource::Gold {
            return Err(Error::Config(
                "rg cannot be gold: reference responses are for evaluation only".into(),
            ));
        }
        if self.et == StageSource::External {
            return Err(Error::Config("entity tracking has no external implementation".into()));
        }
        let need = |on: bool, endpoint: &Option<EndpointConfig>, what: &str| {
            if on && endpoint.is_none() {
                Err(Error::Config(format!("{what} needs an external {what} endpoint")))
            } else {
                Ok(())
            }
        };
        need(self.ktd == StageSource::External, &self.external.scorer, "scorer")?;
        need(self.ks == StageSource::External, &self.external.scorer, "scorer")?;
        need(self.rg == StageSource::External, &self.external.generator, "generator")?;
        need(self.external_absa, &self.external.absa, "absa")?;
        if let Some(t) = self.threshold {
            if !t.is_finite() {
                return Err(Error::Config("threshold must be finite".into()));
            }
        }
        Ok(())
    }
}

/// Everything the stages share: knowledge, indices, models and clients.
pub struct Engine {
    pub kb: KnowledgeBase,
    pub index: LexicalIndex,
    pub tracker: EntityTracker,
    pub lexicon: SentimentLexicon,
    pub detector: Option<LexicalDetectorModel>,
    pub thresholds: Thresholds,
    pub scorer: Option<ExternalScorer>,
    pub absa: Option<AbsaClient>,
    pub generator: Option<GeneratorClient>,
}

impl Engine {
    pub fn new(kb: KnowledgeBase) -> Self {
        Engine {
            index: LexicalIndex::build(&kb),
            tracker: EntityTracker::new(&kb),
            lexicon: SentimentLexicon::builtin(),
            detector: None,
            thresholds: Thresholds::default(),
            scorer: None,
            absa: None,
            generator: None,
            kb,
        }
    }

    /// Loads calibrated thresholds and the detector from an artifacts
    /// directory written by [`calibrate_all`].
    pub fn load_artifacts(&mut self, dir: impl AsRef<Path>) -> Result<()> {
        let (artifacts, detector) = Artifacts::load(dir)?;
        let fingerprint = kb_fingerprint(&self.kb);
        if artifacts.kb_fingerprint != fingerprint {
            return Err(Error::Integrity(format!(
                "artifacts were calibrated on a different knowledge base ({} vs {fingerprint})",
                artifacts.kb_fingerprint
            )));
        }
        self.thresholds = artifacts.thresholds;
        self.detector = Some(detector);
        Ok(())
    }

    /// Builds the clients the configuration asks for.
    pub fn connect(&mut self, config: &ExternalConfig) -> Result<()> {
        if let Some(c) = &config.scorer {
            self.scorer = Some(ExternalScorer {
                client: ScorerClient::new(c.clone())?,
            });
        }
        if let Some(c) = &config.absa {
            self.absa = Some(AbsaClient::new(c.clone())?);
        }
        if let Some(c) = &config.generator {
            self.generator = Some(GeneratorClient::new(c.clone())?);
        }
        Ok(())
    }

    /// Checks that every configured stage up to `config.until` has what it
    /// needs.
    pub fn check(&self, config: &PipelineConfig) -> Result<()> {
        config.validate()?;
        let ks = config.until >= Stage::Ks;
        let rg = config.until == Stage::Rg;
        if config.ktd == StageSource::Native && self.detector.is_none() {
            return Err(Error::Config("native detection needs a trained detector model".into()));
        }
        if ks && config.ks != StageSource::Gold {
            self.threshold(config)?;
        }
        let missing = |ok: bool, what: &str| {
            if ok {
                Ok(())
            } else {
                Err(Error::Config(format!("no {what} client connected")))
            }
        };
        missing(config.ktd != StageSource::External || self.scorer.is_some(), "scorer")?;
        missing(!ks || config.ks != StageSource::External || self.scorer.is_some(), "scorer")?;
        missing(!rg || config.rg != StageSource::External || self.generator.is_some(), "generator")?;
        missing(!rg || !config.external_absa || self.absa.is_some(), "absa")?;
        Ok(())
    }

    pub fn threshold(&self, config: &PipelineConfig) -> Result<f64> {
        if let Some(t) = config.threshold {
            return Ok(t);
        }
        let t = match config.ks {
            StageSource::External => self.thresholds.external,
            _ => match config.scorer {
                LexicalKind::Tfidf => self.thresholds.tfidf,
                LexicalKind::Bm25 => self.thresholds.bm25,
            },
        };
        t.ok_or_else(|| Error::Config("no selection threshold: calibrate first or set one".into()))
    }

    fn lexical(&self, kind: LexicalKind) -> LexicalScorer<'_> {
        LexicalScorer { index: &self.index, kind }
    }

    /// Tags snippets with the lexicon or the ABSA service.
    pub fn annotate(&self, config: &PipelineConfig, refs: &[SnippetRef]) -> Result<Vec<SentimentAnnotation>> {
        refs.iter()
            .map(|r| {
                let snippet = self
                    .kb
                    .snippet(r)
                    .ok_or_else(|| Error::Integrity(format!("unknown snippet {r}")))?;
                match (&self.absa, config.external_absa) {
                    (Some(client), true) => {
                        let fallback = config.external.absa_fallback.then_some(&self.lexicon);
                        external_tag(client, snippet, fallback)
                    }
                    _ => Ok(tag_snippet(&self.lexicon, snippet)),
                }
            })
            .collect()
    }
}

impl Engine {
    /// Scores and ranks every candidate of `entities` for `context`.
    pub fn rank(
        &self,
        config: &PipelineConfig,
        context: &DialogueContext,
        entities: &[EntityKey],
    ) -> Result<Vec<ScoredSnippet>> {
        let candidates = CandidateSet::for_entities(&context.instance_id, &self.kb, entities);
        match (config.ks, &self.scorer) {
            (StageSource::External, Some(s)) => score_candidates(s, context, &candidates),
            _ => score_candidates(&self.lexical(config.scorer), context, &candidates),
        }
    }

    pub fn detect(&self, config: &PipelineConfig, context: &DialogueContext) -> Result<DetectionScore> {
        match (config.ktd, &self.scorer, &self.detector) {
            (StageSource::External, Some(s), _) => external_detect(&s.client, context),
            (_, _, Some(model)) => detect(model, context),
            _ => Err(Error::Config("no detector available".into())),
        }
    }

    /// Response for a selection, per the configured generator.
    pub fn respond(
        &self,
        config: &PipelineConfig,
        context: &DialogueContext,
        selection: &SnippetSelection,
    ) -> Result<(Response, Vec<SentimentAnnotation>)> {
        let refs: Vec<SnippetRef> = selection.selected.iter().map(|s| s.snippet_ref.clone()).collect();
        match (config.rg, &self.generator) {
            (StageSource::External, Some(client)) => {
                let annotations = if config.use_absa {
                    self.annotate(config, &refs)?
                } else {
                    Vec::new()
                };
                let input = build_generation_input(
                    context,
                    selection,
                    &index_annotations(annotations.clone()),
                    &self.kb,
                    config.use_absa,
                );
                Ok((external_generate(client, &input)?, annotations))
            }
            _ if config.rg_mode == RgMode::Ext => {
                if selection.is_empty() {
                    return Ok((
                        Response {
                            text: EMPTY_RESPONSE.to_string(),
                            provenance: Vec::new(),
                            empty: true,
                        },
                        Vec::new(),
                    ));
                }
                Ok((generate_ext(selection, &self.kb, config.seed)?, Vec::new()))
            }
            _ => {
                let annotations = self.annotate(config, &refs)?;
                let response =
                    generate_template(context, selection, &index_annotations(annotations.clone()), &self.kb)?;
                Ok((response, annotations))
            }
        }
    }
}

/// A review sentence in a pipeline output, in the label file layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KnowledgeItem {
    pub domain: crate::corpus::Domain,
    pub entity_id: String,
    pub doc_type: String,
    pub doc_id: String,
    pub sent_id: String,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub score: Option<f64>,
}

impl KnowledgeItem {
    pub fn new(r: &SnippetRef, score: Option<f64>) -> Self {
        KnowledgeItem {
            domain: r.domain,
            entity_id: r.entity_id.clone(),
            doc_type: "review".into(),
            doc_id: r.review_id.clone(),
            sent_id: r.sentence_id.clone(),
            score,
        }
    }

    pub fn snippet_ref(&self) -> SnippetRef {
        SnippetRef::new(self.domain, &self.entity_id, &self.doc_id, &self.sent_id)
    }
}

/// One instance of a pipeline run, shaped like a label entry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceOutput {
    pub instance_id: String,
    pub target: bool,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub logit: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub entities: Option<Vec<EntityKey>>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub knowledge: Option<Vec<KnowledgeItem>>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub ranking: Option<Vec<KnowledgeItem>>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub response: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub grounding: Option<Vec<Provenance>>,
}

impl InstanceOutput {
    pub fn selected(&self) -> BTreeSet<SnippetRef> {
        self.knowledge.iter().flatten().map(KnowledgeItem::snippet_ref).collect()
    }

    pub fn ranked_refs(&self) -> Vec<SnippetRef> {
        self.ranking.iter().flatten().map(KnowledgeItem::snippet_ref).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Quarantined {
    pub instance_id: String,
    pub stage: Stage,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineRun {
    pub outputs: Vec<InstanceOutput>,
    pub quarantined: Vec<Quarantined>,
    pub report: EvalReport,
}

type StageResult<T> = std::result::Result<T, (Stage, Error)>;

fn at<T>(stage: Stage, r: Result<T>) -> StageResult<T> {
    r.map_err(|e| (stage, e))
}

fn run_instance(engine: &Engine, config: &PipelineConfig, inst: &Instance) -> StageResult<InstanceOutput> {
    let ctx = &inst.context;
    let mut out = InstanceOutput {
        instance_id: ctx.instance_id.clone(),
        target: inst.label.target,
        logit: None,
        entities: None,
        knowledge: None,
        ranking: None,
        response: None,
        grounding: None,
    };
    if config.ktd != StageSource::Gold {
        let score = at(Stage::Ktd, engine.detect(config, ctx))?;
        out.target = score.decision;
        out.logit = Some(score.logit);
    }
    if !out.target || config.until == Stage::Ktd {
        return Ok(out);
    }

    let entities: Vec<EntityKey> = match config.et {
        StageSource::Gold => inst.label.gold_entities().into_iter().collect(),
        _ => engine.tracker.track_with_fallback(ctx, None).entities,
    };
    out.entities = Some(entities.clone());
    if config.until == Stage::Et {
        return Ok(out);
    }

    let selection = match config.ks {
        StageSource::Gold => SnippetSelection::from_refs(&ctx.instance_id, inst.label.gold_snippets.iter().cloned()),
        _ => {
            let ranked = at(Stage::Ks, engine.rank(config, ctx, &entities))?;
            let threshold = at(Stage::Ks, engine.threshold(config))?;
            if config.keep_ranking {
                out.ranking = Some(
                    ranked
                        .iter()
                        .map(|s| KnowledgeItem::new(&s.snippet_ref, Some(s.score)))
                        .collect(),
                );
            }
            select_from_ranked(&ctx.instance_id, &ranked, threshold)
        }
    };
    let scored = config.ks != StageSource::Gold;
    out.knowledge = Some(
        selection
            .selected
            .iter()
            .map(|s| KnowledgeItem::new(&s.snippet_ref, scored.then_some(s.score)))
            .collect(),
    );
    if config.until == Stage::Ks {
        return Ok(out);
    }

    let (response, _) = at(Stage::Rg, engine.respond(config, ctx, &selection))?;
    out.response = Some(response.text);
    out.grounding = Some(response.provenance);
    Ok(out)
}

/// Which parts of a run to score.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct EvalScope {
    pub detection: bool,
    pub tracking: bool,
    pub selection: bool,
    pub generation: bool,
}

impl EvalScope {
    /// Every stage that was predicted rather than read from labels.
    pub fn for_config(config: &PipelineConfig) -> Self {
        let predicted = |s: StageSource| s != StageSource::Gold;
        EvalScope {
            detection: predicted(config.ktd),
            tracking: predicted(config.et) && config.until >= Stage::Et,
            selection: (predicted(config.ktd) || predicted(config.et) || predicted(config.ks)) && config.until >= Stage::Ks,
            generation: config.until == Stage::Rg,
        }
    }

    pub fn all() -> Self {
        EvalScope {
            detection: true,
            tracking: true,
            selection: true,
            generation: true,
        }
    }
}

/// Scores outputs against the split's labels. Outputs are matched to
/// instances by id; instances without an output are skipped.
pub fn evaluate_outputs(outputs: &[InstanceOutput], split: &Split, scope: EvalScope) -> Result<EvalReport> {
    let by_id: std::collections::HashMap<&str, &InstanceOutput> =
        outputs.iter().map(|o| (o.instance_id.as_str(), o)).collect();
    let pairs: Vec<(&Instance, &InstanceOutput)> = split
        .instances
        .iter()
        .filter_map(|i| by_id.get(i.context.instance_id.as_str()).map(|o| (i, *o)))
        .collect();
    if pairs.is_empty() {
        return Err(Error::Precondition("no outputs match the split's instances".into()));
    }
    let targets: Vec<(&Instance, &InstanceOutput)> = pairs.iter().copied().filter(|(i, _)| i.label.target).collect();

    let mut inputs = ReportInputs::default();
    if scope.detection {
        inputs.detection = Some(pairs.iter().map(|(i, o)| (o.target, i.label.target)).collect());
    }
    if scope.tracking {
        let tracked: Vec<_> = targets.iter().filter(|(_, o)| o.entities.is_some()).collect();
        if !tracked.is_empty() {
            let pred: Vec<BTreeSet<EntityKey>> = tracked
                .iter()
                .map(|(_, o)| o.entities.iter().flatten().cloned().collect())
                .collect();
            let gold: Vec<BTreeSet<EntityKey>> = tracked.iter().map(|(i, _)| i.label.gold_entities()).collect();
            inputs.tracking = Some(evaluate_tracking(&pred, &gold));
        }
    }
    if scope.selection && !targets.is_empty() {
        let has_ranking = targets.iter().any(|(_, o)| o.ranking.is_some());
        inputs.selection = Some(SelectionInputs {
            predicted: targets.iter().map(|(_, o)| o.selected()).collect(),
            gold: targets.iter().map(|(i, _)| i.label.gold_snippets.clone()).collect(),
            rankings: has_ranking.then(|| targets.iter().map(|(_, o)| o.ranked_refs()).collect()),
        });
    }
    if scope.generation && targets.iter().any(|(_, o)| o.response.is_some()) {
        inputs.generation = Some(GenerationInputs {
            hypotheses: targets
                .iter()
                .map(|(_, o)| o.response.clone().unwrap_or_default())
                .collect(),
            references: targets
                .iter()
                .map(|(i, _)| i.label.reference_response.clone().unwrap_or_default())
                .collect(),
        });
    }
    full_report(&inputs)
}

/// Runs every instance through the configured stages.
///
/// An instance whose stage fails for local reasons is quarantined and the
/// run continues; an unreachable or misbehaving external service aborts the
/// run with the failing stage named in the error.
pub fn run_pipeline(engine: &Engine, config: &PipelineConfig, split: &Split) -> Result<PipelineRun> {
    engine.check(config)?;
    let work = || -> Vec<StageResult<InstanceOutput>> {
        split
            .instances
            .par_iter()
            .map(|inst| run_instance(engine, config, inst))
            .collect()
    };
    let results = match config.workers {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build()
            .map_err(|e| Error::Config(e.to_string()))?
            .install(work),
        None => work(),
    };

    let mut outputs = Vec::with_capacity(results.len());
    let mut quarantined = Vec::new();
    for (inst, r) in split.instances.iter().zip(results) {
        match r {
            Ok(o) => outputs.push(o),
            Err((stage, e)) if e.is_external() => {
                let tag = |x: String| format!("{stage} stage: {x}");
                return Err(match e {
                    Error::Transport { endpoint, message } => Error::Transport {
                        endpoint: tag(endpoint),
                        message,
                    },
                    Error::Protocol { endpoint, message } => Error::Protocol {
                        endpoint: tag(endpoint),
                        message,
                    },
                    other => other,
                });
            }
            Err((stage, e)) => {
                log::warn!("{}: quarantined at {stage}: {e}", inst.context.instance_id);
                quarantined.push(Quarantined {
                    instance_id: inst.context.instance_id.clone(),
                    stage,
                    message: e.to_string(),
                });
            }
        }
    }
    if !quarantined.is_empty() {
        log::warn!("{} of {} instances quarantined", quarantined.len(), split.len());
    }
    let report = if outputs.is_empty() {
        EvalReport::default()
    } else {
        evaluate_outputs(&outputs, split, EvalScope::for_config(config))?
    };
    Ok(PipelineRun {
        outputs,
        quarantined,
        report,
    })
}

pub fn write_outputs(outputs: &[InstanceOutput], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let text = serde_json::to_string_pretty(outputs)?;
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

pub fn read_outputs(path: impl AsRef<Path>) -> Result<Vec<InstanceOutput>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}
