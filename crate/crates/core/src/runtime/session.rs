//! Interactive sessions: one dialogue per session, one turn at a time.

use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use super::{Engine, PipelineConfig, StageSource};
use crate::absa::Polarity;
use crate::corpus::{DialogueContext, Domain, EntityKey, Speaker, Utterance};
use crate::error::{Error, Result};
use crate::external::WireTurn;
use crate::generate::{index_annotations, tally_sentiments, SentimentTally};
use crate::select::select_from_ranked;

pub const DEFAULT_TTL: Duration = Duration::from_secs(30 * 60);

/// Reply for turns that do not ask about guest opinions.
pub const NON_KNOWLEDGE_REPLY: &str = "Sure, I can help with that. Is there anything else you would like to know?";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EntityView {
    pub domain: Domain,
    pub entity_id: String,
    pub name: String,
}

/// A review sentence behind a response.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Grounded {
    #[serde(rename = "ref")]
    pub snippet_ref: String,
    pub entity: String,
    pub text: String,
    pub score: Option<f64>,
    pub aspect: Option<String>,
    pub polarity: Option<Polarity>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntityTally {
    pub entity: EntityView,
    #[serde(flatten)]
    pub counts: SentimentTally,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TurnResult {
    pub user: String,
    pub response: String,
    pub detected: bool,
    pub logit: Option<f64>,
    pub entities: Vec<EntityView>,
    pub grounded: Vec<Grounded>,
    pub tally: Vec<EntityTally>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionView {
    pub session_id: String,
    pub domain: Option<Domain>,
    pub utterances: Vec<WireTurn>,
    pub turns: Vec<TurnResult>,
}

struct Session {
    id: String,
    domain: Option<Domain>,
    utterances: Vec<Utterance>,
    turns: Vec<TurnResult>,
    last_active: Instant,
}

impl Session {
    fn view(&self) -> SessionView {
        SessionView {
            session_id: self.id.clone(),
            domain: self.domain,
            utterances: self.utterances.iter().map(WireTurn::from).collect(),
            turns: self.turns.clone(),
        }
    }
}

pub struct SessionStore {
    sessions: Mutex<HashMap<String, Arc<Mutex<Session>>>>,
    ttl: Duration,
    log: Option<Mutex<File>>,
    counter: AtomicU64,
    salt: u64,
}

impl SessionStore {
    pub fn new(ttl: Duration) -> Self {
        SessionStore {
            sessions: Mutex::new(HashMap::new()),
            ttl,
            log: None,
            counter: AtomicU64::new(0),
            salt: rand::random(),
        }
    }

    /// Appends one JSON line per session event to `path`.
    pub fn with_event_log(mut self, path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        self.log = Some(Mutex::new(file));
        Ok(self)
    }

    fn event(&self, value: serde_json::Value) {
        let Some(log) = &self.log else { return };
        let ts = SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs());
        let mut value = value;
        value["ts"] = ts.into();
        let mut f = log.lock().unwrap_or_else(|p| p.into_inner());
        if let Err(e) = writeln!(f, "{value}") {
            log::warn!("event log: {e}");
        }
    }

    fn purge_expired(&self, sessions: &mut HashMap<String, Arc<Mutex<Session>>>) {
        let ttl = self.ttl;
        let expired: Vec<String> = sessions
            .iter()
            .filter(|(_, s)| s.try_lock().is_ok_and(|s| s.last_active.elapsed() > ttl))
            .map(|(id, _)| id.clone())
            .collect();
        for id in expired {
            sessions.remove(&id);
            self.event(serde_json::json!({"event": "expired", "session_id": id}));
        }
    }

    pub fn create(&self, domain: Option<Domain>) -> String {
        let mut sessions = self.sessions.lock().unwrap_or_else(|p| p.into_inner());
        self.purge_expired(&mut sessions);
        let n = self.counter.fetch_add(1, Ordering::Relaxed);
        let id = format!("{:016x}{n:04x}", self.salt.rotate_left(n as u32 % 64) ^ n);
        sessions.insert(
            id.clone(),
            Arc::new(Mutex::new(Session {
                id: id.clone(),
                domain,
                utterances: Vec::new(),
                turns: Vec::new(),
                last_active: Instant::now(),
            })),
        );
        self.event(serde_json::json!({"event": "created", "session_id": id, "domain": domain}));
        id
    }

    pub fn len(&self) -> usize {
        self.sessions.lock().unwrap_or_else(|p| p.into_inner()).len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn get(&self, id: &str) -> Result<Arc<Mutex<Session>>> {
        let mut sessions = self.sessions.lock().unwrap_or_else(|p| p.into_inner());
        self.purge_expired(&mut sessions);
        sessions
            .get(id)
            .cloned()
            .ok_or_else(|| Error::NotFound(format!("session {id}")))
    }

    pub fn view(&self, id: &str) -> Result<SessionView> {
        let session = self.get(id)?;
        let s = session.lock().unwrap_or_else(|p| p.into_inner());
        Ok(s.view())
    }

    /// Runs one user turn. The session gains exactly the user turn and the
    /// system reply on success and is left untouched on failure. A second
    /// turn for the same session while one is running is a conflict.
    pub fn handle_utterance(
        &self,
        engine: &Engine,
        config: &PipelineConfig,
        id: &str,
        text: &str,
    ) -> Result<TurnResult> {
        let text = text.trim();
        if text.is_empty() {
            return Err(Error::Precondition("empty utterance".into()));
        }
        let session = self.get(id)?;
        let mut s = match session.try_lock() {
            Ok(s) => s,
            Err(std::sync::TryLockError::WouldBlock) => {
                return Err(Error::Conflict(format!("session {id} is already handling a turn")))
            }
            Err(std::sync::TryLockError::Poisoned(p)) => p.into_inner(),
        };

        let mut turns: Vec<(Speaker, String)> =
            s.utterances.iter().map(|u| (u.speaker, u.text.clone())).collect();
        turns.push((Speaker::User, text.to_string()));
        let context = DialogueContext::new(format!("{id}-{}", s.turns.len()), turns)?;
        let result = engine.turn(config, &context, s.domain)?;

        let next = s.utterances.len();
        s.utterances.push(Utterance {
            speaker: Speaker::User,
            text: text.to_string(),
            turn_index: next,
        });
        s.utterances.push(Utterance {
            speaker: Speaker::System,
            text: result.response.clone(),
            turn_index: next + 1,
        });
        s.turns.push(result.clone());
        s.last_active = Instant::now();
        self.event(serde_json::json!({
            "event": "turn",
            "session_id": id,
            "user": text,
            "response": result.response,
            "detected": result.detected,
            "grounded": result.grounded.iter().map(|g| &g.snippet_ref).collect::<Vec<_>>(),
        }));
        Ok(result)
    }
}

impl Engine {
    fn entity_view(&self, key: &EntityKey) -> EntityView {
        EntityView {
            domain: key.domain,
            entity_id: key.entity_id.clone(),
            name: self.kb.entity(key).map(|e| e.name.clone()).unwrap_or_default(),
        }
    }

    /// Checks a configuration for interactive use, where no labels exist.
    pub fn check_service(&self, config: &PipelineConfig) -> Result<()> {
        if [config.ktd, config.et, config.ks].contains(&StageSource::Gold) {
            return Err(Error::Config("interactive sessions cannot use gold stages".into()));
        }
        self.check(config)
    }

    /// One turn of the live pipeline for a context ending in a user turn.
    pub fn turn(&self, config: &PipelineConfig, context: &DialogueContext, domain: Option<Domain>) -> Result<TurnResult> {
        let user = context.last_user().text.clone();
        let score = self.detect(config, context)?;
        if !score.decision {
            return Ok(TurnResult {
                user,
                response: NON_KNOWLEDGE_REPLY.to_string(),
                detected: false,
                logit: Some(score.logit),
                entities: Vec::new(),
                grounded: Vec::new(),
                tally: Vec::new(),
            });
        }

        let entities = self.tracker.track_with_fallback(context, domain).entities;
        let ranked = self.rank(config, context, &entities)?;
        let selection = select_from_ranked(&context.instance_id, &ranked, self.threshold(config)?);
        let (response, annotations) = self.respond(config, context, &selection)?;
        let index = index_annotations(annotations);

        let scores: HashMap<_, _> = selection.selected.iter().map(|s| (&s.snippet_ref, s.score)).collect();
        let grounded = response
            .provenance
            .iter()
            .map(|p| {
                let ann = index.get(&p.snippet_ref);
                Grounded {
                    snippet_ref: p.snippet_ref.to_string(),
                    entity: self.entity_view(&p.snippet_ref.entity()).name,
                    text: self.kb.snippet(&p.snippet_ref).map(|s| s.text.clone()).unwrap_or_default(),
                    score: scores.get(&p.snippet_ref).copied(),
                    aspect: ann.and_then(|a| a.aspect_term.clone()),
                    polarity: p.polarity.or(ann.map(|a| a.polarity)),
                }
            })
            .collect();
        let tally = if index.is_empty() || selection.is_empty() {
            Vec::new()
        } else {
            tally_sentiments(&selection, &index)?
                .into_iter()
                .map(|(key, counts)| EntityTally {
                    entity: self.entity_view(&key),
                    counts,
                })
                .collect()
        };
        Ok(TurnResult {
            user,
            response: response.text,
            detected: true,
            logit: Some(score.logit),
            entities: entities.iter().map(|k| self.entity_view(k)).collect(),
            grounded,
            tally,
        })
    }
}
