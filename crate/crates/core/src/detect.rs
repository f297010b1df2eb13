//! Knowledge-seeking turn detection.
//!
//! The native detector is a logistic regression over hashed word 1–2-grams
//! and character 3–5-grams of the last user turn, plus word unigrams of the
//! preceding system turn. It is trained with averaged SGD on the
//! cross-entropy loss and early-stopped on validation accuracy.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{tokenize, DialogueContext, Speaker, Split};
use crate::error::{Error, Result};
use crate::external::{ScoreTask, ScorerClient};
use crate::metrics::{classification_scores, ClassificationScores};

pub const DEFAULT_THRESHOLD: f64 = 0.0;
const MODEL_FORMAT: &str = "sktod-ktd";
const MODEL_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectionScore {
    pub logit: f64,
    pub decision: bool,
}

impl DetectionScore {
    /// `decision` is `logit > threshold`, strictly.
    pub fn new(logit: f64, threshold: f64) -> Self {
        DetectionScore {
            logit,
            decision: logit > threshold,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DetectorConfig {
    /// Features are hashed into `2^hash_bits` buckets.
    pub hash_bits: u32,
    pub word_orders: (usize, usize),
    pub char_orders: (usize, usize),
    pub use_system_turn: bool,
    pub epochs: usize,
    /// Epochs without a validation improvement before stopping.
    pub patience: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        DetectorConfig {
            hash_bits: 20,
            word_orders: (1, 2),
            char_orders: (3, 5),
            use_system_turn: true,
            epochs: 10,
            patience: 2,
            learning_rate: 0.5,
            seed: 0,
        }
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Sparse, L2-normalized binary feature vector.
type Features = Vec<(u32, f64)>;

fn featurize(config: &DetectorConfig, context: &DialogueContext) -> Features {
    let mask = (1u64 << config.hash_bits) - 1;
    let mut ids: Vec<u32> = Vec::new();
    let mut add = |kind: &str, gram: &str| {
        let key = format!("{kind}\u{1}{gram}");
        ids.push((fnv1a(key.as_bytes()) & mask) as u32);
    };

    let user = &context.last_user().text;
    let tokens = tokenize(user);
    for n in config.word_orders.0..=config.word_orders.1 {
        for w in tokens.windows(n) {
            add(&format!("w{n}"), &w.join(" "));
        }
    }
    let padded: Vec<char> = format!(" {} ", tokens.join(" ")).chars().collect();
    for n in config.char_orders.0..=config.char_orders.1 {
        for w in padded.windows(n) {
            add(&format!("c{n}"), &w.iter().collect::<String>());
        }
    }
    if config.use_system_turn {
        if let Some(system) = context.previous_system() {
            for t in tokenize(&system.text) {
                add("s1", &t);
            }
        }
    }
    add("bias", "");

    ids.sort_unstable();
    ids.dedup();
    let value = 1.0 / (ids.len() as f64).sqrt();
    ids.into_iter().map(|id| (id, value)).collect()
}

fn dot(weights: &[f64], x: &Features) -> f64 {
    x.iter().map(|&(i, v)| weights[i as usize] * v).sum()
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LexicalDetectorModel {
    pub config: DetectorConfig,
    pub bias: f64,
    weights: Vec<f64>,
    pub threshold: f64,
}

#[derive(Serialize, Deserialize)]
struct ModelFile {
    format: String,
    version: u32,
    config: DetectorConfig,
    threshold: f64,
    bias: f64,
    /// Nonzero weights as (feature id, weight), ascending by id.
    weights: Vec<(u32, f64)>,
}

impl LexicalDetectorModel {
    pub fn logit(&self, context: &DialogueContext) -> f64 {
        dot(&self.weights, &featurize(&self.config, context)) + self.bias
    }

    pub fn weight(&self, feature: u32) -> f64 {
        self.weights.get(feature as usize).copied().unwrap_or(0.0)
    }

    pub fn nonzero_weights(&self) -> usize {
        self.weights.iter().filter(|w| **w != 0.0).count()
    }

    pub fn to_json(&self) -> Result<String> {
        let file = ModelFile {
            format: MODEL_FORMAT.into(),
            version: MODEL_VERSION,
            config: self.config.clone(),
            threshold: self.threshold,
            bias: self.bias,
            weights: self
                .weights
                .iter()
                .enumerate()
                .filter(|(_, w)| **w != 0.0)
                .map(|(i, w)| (i as u32, *w))
                .collect(),
        };
        Ok(serde_json::to_string(&file)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: ModelFile = serde_json::from_str(text)?;
        if file.format != MODEL_FORMAT || file.version != MODEL_VERSION {
            return Err(Error::Config(format!(
                "unsupported detector model {} v{}",
                file.format, file.version
            )));
        }
        if !(1..=28).contains(&file.config.hash_bits) {
            return Err(Error::Config(format!("hash_bits {} out of range", file.config.hash_bits)));
        }
        let mut weights = vec![0.0; 1 << file.config.hash_bits];
        for (i, w) in file.weights {
            let slot = weights
                .get_mut(i as usize)
                .ok_or_else(|| Error::Config(format!("feature id {i} outside the hash space")))?;
            if !w.is_finite() {
                return Err(Error::Config(format!("feature {i} has a non-finite weight")));
            }
            *slot = w;
        }
        if !file.bias.is_finite() {
            return Err(Error::Config("non-finite bias".into()));
        }
        Ok(LexicalDetectorModel {
            config: file.config,
            bias: file.bias,
            weights,
            threshold: file.threshold,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}

fn examples(config: &DetectorConfig, split: &Split) -> Vec<(Features, bool)> {
    use rayon::prelude::*;
    split
        .instances
        .par_iter()
        .map(|inst| (featurize(config, &inst.context), inst.label.target))
        .collect()
}

fn accuracy(weights: &[f64], bias: f64, data: &[(Features, bool)]) -> f64 {
    let correct = data
        .iter()
        .filter(|(x, y)| (dot(weights, x) + bias > DEFAULT_THRESHOLD) == *y)
        .count();
    correct as f64 / data.len() as f64
}

/// Trains on `train`, keeping the epoch with the best accuracy on `val`.
pub fn train_detector(train: &Split, val: &Split, config: &DetectorConfig) -> Result<LexicalDetectorModel> {
    if train.is_empty() {
        return Err(Error::Config("detector training split is empty".into()));
    }
    let positives = train.instances.iter().filter(|i| i.label.target).count();
    if positives == 0 || positives == train.len() {
        return Err(Error::Config(
            "detector training data must contain both knowledge-seeking and other turns".into(),
        ));
    }
    if !(1..=28).contains(&config.hash_bits) {
        return Err(Error::Config(format!("hash_bits {} out of range", config.hash_bits)));
    }
    let data = examples(config, train);
    let val_data = if val.is_empty() { None } else { Some(examples(config, val)) };

    let dim = 1usize << config.hash_bits;
    let mut w = vec![0.0; dim];
    let mut u = vec![0.0; dim];
    let (mut b, mut ub) = (0.0, 0.0);
    let mut c = 1.0f64;
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);

    let mut best: Option<(f64, Vec<f64>, f64)> = None;
    let mut stale = 0;
    for epoch in 0..config.epochs.max(1) {
        order.shuffle(&mut rng);
        for &k in &order {
            let (x, y) = &data[k];
            let p = sigmoid(dot(&w, x) + b);
            let g = config.learning_rate * (p - if *y { 1.0 } else { 0.0 });
            for &(i, v) in x {
                w[i as usize] -= g * v;
                u[i as usize] -= c * g * v;
            }
            b -= g;
            ub -= c * g;
            c += 1.0;
        }
        let avg: Vec<f64> = w.iter().zip(&u).map(|(w, u)| w - u / c).collect();
        let avg_b = b - ub / c;
        let score = accuracy(&avg, avg_b, val_data.as_deref().unwrap_or(&data));
        log::info!("detector epoch {}: validation accuracy {score:.4}", epoch + 1);
        if best.as_ref().is_none_or(|(s, _, _)| score > *s) {
            best = Some((score, avg, avg_b));
            stale = 0;
        } else {
            stale += 1;
            if stale >= config.patience {
                break;
            }
        }
    }
    let (_, weights, bias) = best.expect("at least one epoch");
    Ok(LexicalDetectorModel {
        config: config.clone(),
        bias,
        weights,
        threshold: DEFAULT_THRESHOLD,
    })
}

fn check_last_turn(context: &DialogueContext) -> Result<()> {
    match context.utterances.last() {
        Some(u) if u.speaker == Speaker::User => Ok(()),
        Some(_) => Err(Error::Precondition(format!(
            "{}: last turn is a system turn",
            context.instance_id
        ))),
        None => Err(Error::Precondition(format!("{}: empty dialogue", context.instance_id))),
    }
}

pub fn detect(model: &LexicalDetectorModel, context: &DialogueContext) -> Result<DetectionScore> {
    check_last_turn(context)?;
    Ok(DetectionScore::new(model.logit(context), model.threshold))
}

pub fn evaluate_detector(model: &LexicalDetectorModel, split: &Split) -> Result<ClassificationScores> {
    let pairs = split
        .instances
        .iter()
        .map(|inst| Ok((detect(model, &inst.context)?.decision, inst.label.target)))
        .collect::<Result<Vec<_>>>()?;
    Ok(classification_scores(pairs))
}

pub fn external_detect(client: &ScorerClient, context: &DialogueContext) -> Result<DetectionScore> {
    check_last_turn(context)?;
    Ok(DetectionScore::new(
        client.score(ScoreTask::Ktd, context, "")?,
        DEFAULT_THRESHOLD,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{Domain, Instance, InstanceLabel, SnippetRef, SplitName, Utterance};
    use proptest::prelude::*;

    fn ctx(id: &str, text: &str) -> DialogueContext {
        DialogueContext::new(id, [(Speaker::User, text)]).unwrap()
    }

    fn instance(id: usize, text: &str, target: bool) -> Instance {
        let label = if target {
            InstanceLabel {
                target: true,
                gold_snippets: [SnippetRef::new(Domain::Hotel, "0", "0", "0")].into(),
                reference_response: Some("r".into()),
            }
        } else {
            InstanceLabel::negative()
        };
        Instance {
            context: ctx(&format!("t-{id}"), text),
            label,
        }
    }

    fn toy() -> Split {
        let subjects = ["room", "bed", "pool", "bar", "lobby", "view", "staff", "food", "gym", "parking"];
        let mut v = Vec::new();
        for (i, s) in subjects.iter().enumerate() {
            v.push(instance(2 * i, &format!("do guests like the {s}?"), true));
            v.push(instance(2 * i + 1, &format!("please book the {s} now"), false));
        }
        Split::new(SplitName::Train, v).unwrap()
    }

    fn small() -> DetectorConfig {
        DetectorConfig {
            hash_bits: 16,
            epochs: 20,
            patience: 20,
            ..DetectorConfig::default()
        }
    }

    #[test]
    fn separable_toy_is_learned() {
        let split = toy();
        let model = train_detector(&split, &split, &small()).unwrap();
        let s = evaluate_detector(&model, &split).unwrap();
        assert_eq!(s.accuracy, 1.0);
        assert!(detect(&model, &ctx("x", "do guests like the garden?")).unwrap().decision);
    }

    #[test]
    fn bad_training_data() {
        let empty = Split::new(SplitName::Train, vec![]).unwrap();
        assert!(matches!(train_detector(&empty, &empty, &small()), Err(Error::Config(_))));
        let one_class = Split::new(SplitName::Train, vec![instance(0, "a", true), instance(1, "b", true)]).unwrap();
        assert!(matches!(train_detector(&one_class, &one_class, &small()), Err(Error::Config(_))));
    }

    #[test]
    fn zero_logit_is_negative() {
        assert!(!DetectionScore::new(0.0, 0.0).decision);
        assert!(DetectionScore::new(1e-12, 0.0).decision);
    }

    #[test]
    fn system_last_turn_is_rejected() {
        let split = toy();
        let model = train_detector(&split, &split, &small()).unwrap();
        let mut c = ctx("x", "hi");
        c.utterances.push(Utterance {
            speaker: Speaker::System,
            text: "hello".into(),
            turn_index: 1,
        });
        assert!(matches!(detect(&model, &c), Err(Error::Precondition(_))));
    }

    #[test]
    fn save_load_round_trip() {
        let split = toy();
        let model = train_detector(&split, &split, &small()).unwrap();
        let back = LexicalDetectorModel::from_json(&model.to_json().unwrap()).unwrap();
        assert_eq!(back, model);
        assert!(LexicalDetectorModel::from_json(r#"{"format":"x","version":1,"config":{},"threshold":0,"bias":0,"weights":[]}"#).is_err());
    }

    #[test]
    fn training_is_deterministic() {
        let split = toy();
        let a = train_detector(&split, &split, &small()).unwrap();
        let b = train_detector(&split, &split, &small()).unwrap();
        assert_eq!(a.to_json().unwrap(), b.to_json().unwrap());
    }

    #[test]
    fn brute_force_accuracy() {
        let split = toy();
        let model = train_detector(&split, &split, &DetectorConfig { epochs: 1, ..small() }).unwrap();
        let s = evaluate_detector(&model, &split).unwrap();
        let correct = split
            .instances
            .iter()
            .filter(|i| (model.logit(&i.context) > 0.0) == i.label.target)
            .count();
        assert_eq!(s.accuracy, correct as f64 / split.len() as f64);
    }

    proptest! {
        #[test]
        fn shift_invariance(a in -20.0f64..20.0, shift in -50.0f64..50.0) {
            prop_assume!(a.abs() > 1e-6);
            prop_assert_eq!(DetectionScore::new(a, 0.0).decision, DetectionScore::new(a + shift, shift).decision);
        }
    }
}
