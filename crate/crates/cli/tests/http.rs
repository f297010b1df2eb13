use std::path::PathBuf;
use std::sync::{Arc, OnceLock};
use std::thread;

use serde_json::{json, Value};
use sktod_cli::{router, AppState};
use sktod_core::corpus::load_knowledge_base;
use sktod_core::runtime::{calibrate_all, Engine, PipelineConfig, SessionStore, DEFAULT_TTL};

fn fixture() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../core/tests/fixtures/mini")
}

/// Calibrating takes a moment, so tests share one engine.
fn engine() -> Arc<Engine> {
    static ENGINE: OnceLock<Arc<Engine>> = OnceLock::new();
    ENGINE
        .get_or_init(|| {
            let mut e = Engine::new(load_knowledge_base(fixture()).unwrap());
            let dir = tempfile::tempdir().unwrap();
            calibrate_all(&mut e, fixture(), dir.path(), 0).unwrap();
            Arc::new(e)
        })
        .clone()
}

struct Server {
    base: String,
    stop: Option<tokio::sync::oneshot::Sender<()>>,
    handle: Option<thread::JoinHandle<()>>,
}

impl Server {
    fn start(config: PipelineConfig, static_dir: Option<PathBuf>) -> Server {
        let state = AppState {
            engine: engine(),
            config: Arc::new(config),
            sessions: Arc::new(SessionStore::new(DEFAULT_TTL)),
        };
        let (tx, rx) = tokio::sync::oneshot::channel();
        let (addr_tx, addr_rx) = std::sync::mpsc::channel();
        let handle = thread::spawn(move || {
            let rt = tokio::runtime::Runtime::new().unwrap();
            rt.block_on(async move {
                let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
                addr_tx.send(listener.local_addr().unwrap()).unwrap();
                sktod_cli::serve(listener, router(state, static_dir), async {
                    let _ = rx.await;
                })
                .await
                .unwrap();
            });
        });
        let addr = addr_rx.recv().unwrap();
        Server {
            base: format!("http://{addr}"),
            stop: Some(tx),
            handle: Some(handle),
        }
    }

    fn agent() -> ureq::Agent {
        ureq::Agent::config_builder()
            .http_status_as_error(false)
            .build()
            .into()
    }

    fn get(&self, path: &str) -> (u16, Value) {
        let mut r = Self::agent().get(format!("{}{path}", self.base)).call().unwrap();
        let status = r.status().as_u16();
        (status, r.body_mut().read_json().unwrap_or(Value::Null))
    }

    fn post(&self, path: &str, body: Value) -> (u16, Value) {
        let mut r = Self::agent()
            .post(format!("{}{path}", self.base))
            .send_json(body)
            .unwrap();
        let status = r.status().as_u16();
        (status, r.body_mut().read_json().unwrap_or(Value::Null))
    }

    fn session(&self, domain: Option<&str>) -> String {
        let body = domain.map_or(json!({}), |d| json!({ "domain": d }));
        let (status, v) = self.post("/v1/sessions", body);
        assert_eq!(status, 201, "{v}");
        v["session_id"].as_str().unwrap().to_string()
    }

    fn say(&self, id: &str, text: &str) -> (u16, Value) {
        self.post(&format!("/v1/sessions/{id}/utterance"), json!({ "text": text }))
    }
}

impl Drop for Server {
    fn drop(&mut self) {
        if let Some(tx) = self.stop.take() {
            let _ = tx.send(());
        }
        if let Some(h) = self.handle.take() {
            let _ = h.join();
        }
    }
}

#[test]
fn health_reports_every_stage() {
    let s = Server::start(PipelineConfig::default(), None);
    let (status, v) = s.get("/v1/health");
    assert_eq!(status, 200);
    assert_eq!(v["status"], "ok");
    for stage in ["ktd", "et", "ks", "rg"] {
        assert_eq!(v["stages"][stage]["ready"], true, "{stage}");
        assert_eq!(v["stages"][stage]["source"], "native");
    }
}

#[test]
fn health_is_degraded_without_a_threshold() {
    let mut bare = Engine::new(load_knowledge_base(fixture()).unwrap());
    bare.detector = engine().detector.clone();
    let state = AppState {
        engine: Arc::new(bare),
        config: Arc::new(PipelineConfig::default()),
        sessions: Arc::new(SessionStore::new(DEFAULT_TTL)),
    };
    let stages = sktod_cli::stage_status(&state.engine, &state.config);
    assert_eq!(stages["ks"]["ready"], false);
    assert_eq!(stages["ktd"]["ready"], true);
}

#[test]
fn table7_dialogue_over_http() {
    let s = Server::start(PipelineConfig::default(), None);
    let id = s.session(Some("hotel"));
    s.say(&id, "Are there any hotels (not guesthouses) that have 0 stars?");
    s.say(&id, "Do they have free wifi?");
    let (status, turn) = s.say(&id, "Does the Cityroomz have strong water pressure in the shower?");
    assert_eq!(status, 200, "{turn}");
    assert_eq!(turn["detected"], true);
    assert_eq!(turn["entities"][0]["name"], "Cityroomz");
    let grounded = turn["grounded"].as_array().unwrap();
    assert!(!grounded.is_empty());
    assert!(grounded.iter().all(|g| g["polarity"] == "negative"), "{turn}");
    let tally = &turn["tally"][0];
    assert_eq!(tally["negative"], grounded.len());
    assert_eq!(tally["positive"], 0);

    let (status, view) = s.get(&format!("/v1/sessions/{id}"));
    assert_eq!(status, 200);
    assert_eq!(view["utterances"].as_array().unwrap().len(), 6);
    assert_eq!(view["turns"][2]["grounded"], turn["grounded"]);
    assert_eq!(view["utterances"][5]["speaker"], "S");
}

#[test]
fn booking_turn_has_no_grounding() {
    let s = Server::start(PipelineConfig::default(), None);
    let id = s.session(None);
    let (status, turn) = s.say(&id, "Book it for 2 nights");
    assert_eq!(status, 200);
    assert_eq!(turn["detected"], false);
    assert_eq!(turn["grounded"], json!([]));
}

#[test]
fn errors_map_to_statuses() {
    let s = Server::start(PipelineConfig::default(), None);
    assert_eq!(s.say("nope", "hello").0, 404);
    assert_eq!(s.get("/v1/sessions/nope").0, 404);
    assert_eq!(s.post("/v1/sessions", json!({ "domain": "spa" })).0, 400);
    let id = s.session(None);
    assert_eq!(s.say(&id, "   ").0, 400);
    assert_eq!(s.post(&format!("/v1/sessions/{id}/utterance"), json!({ "txt": 1 })).0, 400);
    assert_eq!(s.get("/v1/entities?domain=spa").0, 400);
}

#[test]
fn entities_filter_by_domain() {
    let s = Server::start(PipelineConfig::default(), None);
    let (_, all) = s.get("/v1/entities");
    let (_, hotels) = s.get("/v1/entities?domain=hotel");
    let hotels = hotels.as_array().unwrap();
    assert!(hotels.iter().all(|e| e["domain"] == "hotel"));
    assert!(hotels.iter().any(|e| e["name"] == "Cityroomz"));
    assert!(all.as_array().unwrap().len() > hotels.len());
}

#[test]
fn concurrent_turns_keep_sessions_consistent() {
    let s = Arc::new(Server::start(PipelineConfig::default(), None));
    let id = s.session(None);
    let other = s.session(None);
    let workers: Vec<_> = (0..8)
        .map(|i| {
            let s = s.clone();
            let target = if i % 2 == 0 { id.clone() } else { other.clone() };
            thread::spawn(move || s.say(&target, "What is the postcode?").0)
        })
        .collect();
    let statuses: Vec<u16> = workers.into_iter().map(|w| w.join().unwrap()).collect();
    assert!(statuses.iter().all(|&c| c == 200 || c == 409), "{statuses:?}");
    for (sid, parity) in [(&id, 0), (&other, 1)] {
        let ok = statuses
            .iter()
            .enumerate()
            .filter(|(i, &c)| i % 2 == parity && c == 200)
            .count();
        let (_, view) = s.get(&format!("/v1/sessions/{sid}"));
        assert_eq!(view["utterances"].as_array().unwrap().len(), 2 * ok);
    }
}

#[test]
fn serves_static_files() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("index.html"), "<h1>chat</h1>").unwrap();
    let s = Server::start(PipelineConfig::default(), Some(dir.path().to_path_buf()));
    let mut r = ureq::get(format!("{}/index.html", s.base)).call().unwrap();
    assert_eq!(r.body_mut().read_to_string().unwrap(), "<h1>chat</h1>");
    assert_eq!(s.get("/v1/health").0, 200);
}

#[test]
fn shutdown_completes() {
    let s = Server::start(PipelineConfig::default(), None);
    let id = s.session(None);
    assert_eq!(s.say(&id, "Thanks, that is all I need.").0, 200);
    drop(s);
}
