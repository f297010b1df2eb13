//! End-to-end runs over the bundled mini dataset.

use std::path::PathBuf;

use sktod_core::absa::Polarity;
use sktod_core::corpus::{load_knowledge_base, load_split, Domain, Split, SplitName};
use sktod_core::runtime::{
    calibrate_all, run_pipeline, Ablation, Engine, PipelineConfig, RgMode, SessionStore, StageSource, DEFAULT_TTL,
    NON_KNOWLEDGE_REPLY,
};
use sktod_core::Error;

fn fixture() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/mini")
}

fn engine() -> Engine {
    Engine::new(load_knowledge_base(fixture()).unwrap())
}

fn split(name: SplitName) -> Split {
    load_split(fixture(), name).unwrap().0
}

fn calibrated() -> (Engine, tempfile::TempDir) {
    let mut e = engine();
    let dir = tempfile::tempdir().unwrap();
    calibrate_all(&mut e, fixture(), dir.path(), 0).unwrap();
    (e, dir)
}

#[test]
fn calibration_is_idempotent() {
    let (_, a) = calibrated();
    let (_, b) = calibrated();
    for f in ["artifacts.json", "detector.json"] {
        let x = std::fs::read(a.path().join(f)).unwrap();
        let y = std::fs::read(b.path().join(f)).unwrap();
        assert_eq!(x, y, "{f} differs");
    }
    let mut reloaded = engine();
    reloaded.load_artifacts(a.path()).unwrap();
    assert!(reloaded.thresholds.tfidf.is_some() && reloaded.detector.is_some());
}

#[test]
fn missing_split_fails_calibration() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::copy(fixture().join("knowledge.json"), dir.path().join("knowledge.json")).unwrap();
    let mut e = engine();
    let err = calibrate_all(&mut e, dir.path(), dir.path().join("out"), 0).unwrap_err();
    assert!(matches!(err, Error::NotFound(_)), "{err}");
}

#[test]
fn artifacts_from_another_kb_are_rejected() {
    let (_, dir) = calibrated();
    let mut b = sktod_core::corpus::KnowledgeBase::builder();
    b.entity(Domain::Hotel, "0", "Other").unwrap();
    let mut other = Engine::new(b.build());
    assert!(matches!(other.load_artifacts(dir.path()), Err(Error::Integrity(_))));
}

#[test]
fn ablation_rows_run_and_gold_selection_is_perfect() {
    let (e, _dir) = calibrated();
    let test = split(SplitName::Test);
    for row in Ablation::ALL {
        let run = run_pipeline(&e, &PipelineConfig::ablation(row), &test).unwrap();
        assert!(run.quarantined.is_empty());
        let map = run.report.map_score.unwrap();
        assert!((0.0..=1.0).contains(&map), "{} {map}", row.label());
        assert!(run.report.snippet_prf.unwrap().f1 <= 1.0);
    }
    let gold_ks = PipelineConfig {
        ktd: StageSource::Gold,
        ks: StageSource::Gold,
        ..PipelineConfig::default()
    };
    let run = run_pipeline(&e, &gold_ks, &test).unwrap();
    assert_eq!(run.report.snippet_prf.unwrap().f1, 1.0);
    assert_eq!(run.report.instance_prf.unwrap().f1, 1.0);
    let detection = run_pipeline(&e, &PipelineConfig::ablation(Ablation::KtdEtKs), &test).unwrap();
    assert!(detection.report.detection.unwrap().accuracy > 0.9);
}

#[test]
fn batch_outputs_are_byte_identical() {
    let (e, _dir) = calibrated();
    let test = split(SplitName::Test);
    for rg_mode in [RgMode::Template, RgMode::Ext] {
        let config = PipelineConfig {
            rg_mode,
            seed: 11,
            ..PipelineConfig::ablation(Ablation::KtdEtKs)
        };
        let dump = || serde_json::to_string(&run_pipeline(&e, &config, &test).unwrap()).unwrap();
        assert_eq!(dump(), dump());
    }
}

#[test]
fn table7_turn_is_grounded_in_negative_water_pressure_reviews() {
    let (e, _dir) = calibrated();
    let store = SessionStore::new(DEFAULT_TTL);
    let config = PipelineConfig::default();
    let id = store.create(Some(Domain::Hotel));
    for user in [
        "Are there any hotels (not guesthouses) that have 0 stars?",
        "Do they have free wifi?",
    ] {
        store.handle_utterance(&e, &config, &id, user).unwrap();
    }
    let turn = store
        .handle_utterance(&e, &config, &id, "Does the Cityroomz have strong water pressure in the shower?")
        .unwrap();
    assert!(turn.detected);
    let names: Vec<_> = turn.entities.iter().map(|v| v.name.as_str()).collect();
    assert_eq!(names, ["Cityroomz"]);
    assert!(!turn.grounded.is_empty());
    for g in &turn.grounded {
        assert!(g.text.contains("water pressure") || g.text.contains("shower"), "{}", g.text);
        assert_eq!(g.polarity, Some(Polarity::Negative), "{}", g.text);
    }
    assert_eq!(store.view(&id).unwrap().utterances.len(), 6);
}

#[test]
fn booking_turn_is_not_grounded() {
    let (e, _dir) = calibrated();
    let store = SessionStore::new(DEFAULT_TTL);
    let id = store.create(None);
    let turn = store
        .handle_utterance(&e, &PipelineConfig::default(), &id, "Book it for 2 nights")
        .unwrap();
    assert!(!turn.detected);
    assert!(turn.grounded.is_empty());
    assert_eq!(turn.response, NON_KNOWLEDGE_REPLY);
}

#[test]
fn expired_session_is_not_found() {
    let (e, _dir) = calibrated();
    let store = SessionStore::new(std::time::Duration::ZERO);
    let id = store.create(None);
    std::thread::sleep(std::time::Duration::from_millis(5));
    let err = store
        .handle_utterance(&e, &PipelineConfig::default(), &id, "hello")
        .unwrap_err();
    assert!(matches!(err, Error::NotFound(_)));
}

#[test]
fn failed_turn_leaves_session_untouched() {
    let e = engine();
    let store = SessionStore::new(DEFAULT_TTL);
    let id = store.create(None);
    // No detector loaded.
    assert!(store.handle_utterance(&e, &PipelineConfig::default(), &id, "hi").is_err());
    assert!(store.view(&id).unwrap().utterances.is_empty());
    assert!(matches!(
        store.handle_utterance(&e, &PipelineConfig::default(), &id, "  "),
        Err(Error::Precondition(_))
    ));
}

#[test]
fn event_log_records_turns() {
    let (e, _dir) = calibrated();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("events.jsonl");
    let store = SessionStore::new(DEFAULT_TTL).with_event_log(&path).unwrap();
    let id = store.create(None);
    store
        .handle_utterance(&e, &PipelineConfig::default(), &id, "What is the postcode?")
        .unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    let events: Vec<serde_json::Value> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(events.len(), 2);
    assert_eq!(events[1]["event"], "turn");
    assert_eq!(events[1]["session_id"], id.as_str());
}
