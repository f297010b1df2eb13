//! JSON-over-HTTP clients for neural components that run out of process.
//!
//! Three services are supported, each a single `POST` endpoint:
//!
//! | service   | request                                   | reply                         |
//! |-----------|-------------------------------------------|-------------------------------|
//! | scorer    | `{"task": "ks"\|"ktd", "context": [..], "snippet": ".."}` | `{"logit": f}` |
//! | scorer, batch | array of the above                    | array of `{"logit": f}`, positional |
//! | ABSA      | `{"sentence": ".."}`                      | `{"aspect": "..", "polarity": ".."}` |
//! | generator | `{"context": [..], "snippets": [..]}`     | `{"response": ".."}`          |
//!
//! Context turns are `{"speaker": "U"|"S", "text": ".."}`. For `ktd`
//! requests `snippet` is the empty string.
//!
//! Connection failures, timeouts and non-2xx statuses are [`Error::Transport`]
//! and are retried a bounded number of times; anything that parses wrongly is
//! [`Error::Protocol`] and is not retried.

use std::time::Duration;

use rayon::prelude::*;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::absa::Polarity;
use crate::corpus::{DialogueContext, KnowledgeSnippet, Utterance};
use crate::error::{Error, Result};
use crate::select::SnippetScorer;

pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(30);
pub const DEFAULT_PARALLELISM: usize = 8;
pub const DEFAULT_RETRIES: u32 = 2;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WireTurn {
    pub speaker: String,
    pub text: String,
}

impl From<&Utterance> for WireTurn {
    fn from(u: &Utterance) -> Self {
        WireTurn {
            speaker: u.speaker.tag().to_string(),
            text: u.text.clone(),
        }
    }
}

pub fn wire_context(context: &DialogueContext) -> Vec<WireTurn> {
    context.utterances.iter().map(WireTurn::from).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScoreTask {
    Ks,
    Ktd,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScoreRequest {
    pub task: ScoreTask,
    pub context: Vec<WireTurn>,
    pub snippet: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScoreReply {
    pub logit: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AbsaRequest {
    pub sentence: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AbsaReply {
    #[serde(default)]
    pub aspect: Option<String>,
    pub polarity: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GenerateRequest {
    pub context: Vec<WireTurn>,
    pub snippets: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GenerateReply {
    pub response: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EndpointConfig {
    /// Full URL of the single-request endpoint.
    pub url: String,
    /// Batch endpoint for the scorer; when absent, batches are sent one
    /// request at a time.
    #[serde(default)]
    pub batch_url: Option<String>,
    #[serde(default = "default_timeout_secs")]
    pub timeout_secs: f64,
    #[serde(default = "default_retries")]
    pub retries: u32,
    #[serde(default = "default_parallelism")]
    pub parallelism: usize,
}

fn default_timeout_secs() -> f64 {
    DEFAULT_TIMEOUT.as_secs_f64()
}

fn default_retries() -> u32 {
    DEFAULT_RETRIES
}

fn default_parallelism() -> usize {
    DEFAULT_PARALLELISM
}

impl EndpointConfig {
    pub fn new(url: impl Into<String>) -> Self {
        EndpointConfig {
            url: url.into(),
            batch_url: None,
            timeout_secs: default_timeout_secs(),
            retries: DEFAULT_RETRIES,
            parallelism: DEFAULT_PARALLELISM,
        }
    }
}

/// Blocking HTTP client for one endpoint (plus its optional batch twin).
pub struct Client {
    config: EndpointConfig,
    agent: ureq::Agent,
    pool: rayon::ThreadPool,
}

impl std::fmt::Debug for Client {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Client").field("config", &self.config).finish()
    }
}

impl Client {
    pub fn new(config: EndpointConfig) -> Result<Self> {
        if config.timeout_secs.partial_cmp(&0.0) != Some(std::cmp::Ordering::Greater) {
            return Err(Error::Config(format!("{}: timeout must be positive", config.url)));
        }
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs_f64(config.timeout_secs)))
            .http_status_as_error(false)
            .build()
            .into();
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(config.parallelism.max(1))
            .thread_name(|i| format!("sktod-external-{i}"))
            .build()
            .map_err(|e| Error::Config(e.to_string()))?;
        Ok(Client { config, agent, pool })
    }

    pub fn config(&self) -> &EndpointConfig {
        &self.config
    }

    fn post_once<Q: Serialize, R: DeserializeOwned>(&self, url: &str, body: &Q) -> Result<R> {
        let transport = |message: String| Error::Transport {
            endpoint: url.to_string(),
            message,
        };
        let mut resp = self
            .agent
            .post(url)
            .send_json(body)
            .map_err(|e| transport(e.to_string()))?;
        let status = resp.status();
        let text = resp
            .body_mut()
            .read_to_string()
            .map_err(|e| transport(e.to_string()))?;
        if !status.is_success() {
            let mut snippet: String = text.chars().take(200).collect();
            if snippet.is_empty() {
                snippet = "(empty body)".into();
            }
            return Err(transport(format!("status {}: {snippet}", status.as_u16())));
        }
        serde_json::from_str(&text).map_err(|e| Error::Protocol {
            endpoint: url.to_string(),
            message: e.to_string(),
        })
    }

    /// POSTs `body`, retrying transport failures with a short backoff.
    pub fn post<Q: Serialize, R: DeserializeOwned>(&self, url: &str, body: &Q) -> Result<R> {
        let mut attempt = 0;
        loop {
            match self.post_once(url, body) {
                Err(e) if e.is_retriable() && attempt < self.config.retries => {
                    attempt += 1;
                    log::warn!("{e}; retry {attempt}/{}", self.config.retries);
                    std::thread::sleep(Duration::from_millis(100 * (1 << attempt.min(5))));
                }
                other => return other,
            }
        }
    }

    /// Maps `f` over `items` with at most `parallelism` requests in flight,
    /// keeping input order.
    pub fn map_bounded<T: Sync, R: Send>(&self, items: &[T], f: impl Fn(&T) -> Result<R> + Sync) -> Vec<Result<R>> {
        self.pool.install(|| items.par_iter().map(&f).collect())
    }
}

fn protocol(endpoint: &str, message: impl Into<String>) -> Error {
    Error::Protocol {
        endpoint: endpoint.to_string(),
        message: message.into(),
    }
}

fn finite_logit(endpoint: &str, reply: ScoreReply) -> Result<f64> {
    if reply.logit.is_finite() {
        Ok(reply.logit)
    } else {
        Err(protocol(endpoint, "non-finite logit"))
    }
}

/// Client for the scorer protocol, usable both for detection (`ktd`) and
/// selection (`ks`).
#[derive(Debug)]
pub struct ScorerClient {
    client: Client,
}

impl ScorerClient {
    pub fn new(config: EndpointConfig) -> Result<Self> {
        Ok(ScorerClient { client: Client::new(config)? })
    }

    pub fn client(&self) -> &Client {
        &self.client
    }

    pub fn score(&self, task: ScoreTask, context: &DialogueContext, snippet: &str) -> Result<f64> {
        let req = ScoreRequest {
            task,
            context: wire_context(context),
            snippet: snippet.to_string(),
        };
        let url = &self.client.config.url;
        finite_logit(url, self.client.post(url, &req)?)
    }

    /// One logit per snippet, in input order.
    pub fn score_many(&self, task: ScoreTask, context: &DialogueContext, snippets: &[&str]) -> Result<Vec<f64>> {
        if snippets.is_empty() {
            return Ok(Vec::new());
        }
        let Some(batch_url) = &self.client.config.batch_url else {
            return self
                .client
                .map_bounded(snippets, |s| self.score(task, context, s))
                .into_iter()
                .collect();
        };
        let turns = wire_context(context);
        let reqs: Vec<ScoreRequest> = snippets
            .iter()
            .map(|s| ScoreRequest {
                task,
                context: turns.clone(),
                snippet: s.to_string(),
            })
            .collect();
        let replies: Vec<ScoreReply> = self.client.post(batch_url, &reqs)?;
        if replies.len() != reqs.len() {
            return Err(protocol(
                batch_url,
                format!("{} replies for {} requests", replies.len(), reqs.len()),
            ));
        }
        replies.into_iter().map(|r| finite_logit(batch_url, r)).collect()
    }
}

/// A [`SnippetScorer`] backed by the remote scorer.
#[derive(Debug)]
pub struct ExternalScorer {
    pub client: ScorerClient,
}

impl SnippetScorer for ExternalScorer {
    fn name(&self) -> &str {
        &self.client.client.config.url
    }

    fn score_batch(&self, context: &DialogueContext, candidates: &[&KnowledgeSnippet]) -> Result<Vec<f64>> {
        let texts: Vec<&str> = candidates.iter().map(|s| s.text.as_str()).collect();
        self.client.score_many(ScoreTask::Ks, context, &texts)
    }
}

#[derive(Debug)]
pub struct AbsaClient {
    client: Client,
}

impl AbsaClient {
    pub fn new(config: EndpointConfig) -> Result<Self> {
        Ok(AbsaClient { client: Client::new(config)? })
    }

    pub fn client(&self) -> &Client {
        &self.client
    }

    /// Aspect term and polarity of one sentence.
    pub fn tag(&self, sentence: &str) -> Result<(Option<String>, Polarity)> {
        let url = &self.client.config.url;
        let reply: AbsaReply = self.client.post(
            url,
            &AbsaRequest {
                sentence: sentence.to_string(),
            },
        )?;
        let polarity = Polarity::parse(&reply.polarity)
            .ok_or_else(|| protocol(url, format!("unknown polarity {:?}", reply.polarity)))?;
        let aspect = reply.aspect.map(|a| a.trim().to_string()).filter(|a| !a.is_empty());
        match (polarity, aspect) {
            (Polarity::None, _) => Ok((None, Polarity::None)),
            (_, None) => Err(protocol(url, "polarity without an aspect term")),
            (p, a) => Ok((a, p)),
        }
    }
}

#[derive(Debug)]
pub struct GeneratorClient {
    client: Client,
}

impl GeneratorClient {
    pub fn new(config: EndpointConfig) -> Result<Self> {
        Ok(GeneratorClient { client: Client::new(config)? })
    }

    pub fn client(&self) -> &Client {
        &self.client
    }

    pub fn generate(&self, request: &GenerateRequest) -> Result<String> {
        let url = &self.client.config.url;
        let reply: GenerateReply = self.client.post(url, request)?;
        if reply.response.trim().is_empty() {
            return Err(protocol(url, "empty response text"));
        }
        Ok(reply.response)
    }
}


#[cfg(test)]
mod tests {
    use super::mock::serve;
    use super::*;
    use crate::corpus::Speaker;
    use std::sync::atomic::Ordering;

    fn ctx() -> DialogueContext {
        DialogueContext::new("i", [(Speaker::User, "is the wifi good?")]).unwrap()
    }

    fn fast(url: &str) -> EndpointConfig {
        EndpointConfig {
            timeout_secs: 5.0,
            retries: 1,
            ..EndpointConfig::new(url)
        }
    }

    #[test]
    fn single_score_round_trip() {
        let m = serve(|body| {
            let req: ScoreRequest = serde_json::from_str(body).unwrap();
            assert_eq!(req.task, ScoreTask::Ks);
            assert_eq!(req.context[0].speaker, "U");
            (200, format!("{{\"logit\": {}}}", req.snippet.len()))
        });
        let c = ScorerClient::new(fast(&m.url)).unwrap();
        assert_eq!(c.score(ScoreTask::Ks, &ctx(), "abc").unwrap(), 3.0);
    }

    #[test]
    fn unbatched_many_keeps_order() {
        let m = serve(|body| {
            let req: ScoreRequest = serde_json::from_str(body).unwrap();
            (200, format!("{{\"logit\": {}}}", req.snippet.len()))
        });
        let c = ScorerClient::new(fast(&m.url)).unwrap();
        let texts = ["a", "abcd", "ab", "abcdefg", "abc"];
        assert_eq!(c.score_many(ScoreTask::Ks, &ctx(), &texts).unwrap(), [1.0, 4.0, 2.0, 7.0, 3.0]);
    }

    #[test]
    fn batch_is_positional() {
        let m = serve(|body| {
            let reqs: Vec<ScoreRequest> = serde_json::from_str(body).unwrap();
            let out: Vec<String> = reqs.iter().map(|r| format!("{{\"logit\": {}}}", r.snippet.len())).collect();
            (200, format!("[{}]", out.join(",")))
        });
        let c = ScorerClient::new(EndpointConfig {
            batch_url: Some(m.url.clone()),
            ..fast("http://127.0.0.1:9")
        })
        .unwrap();
        assert_eq!(c.score_many(ScoreTask::Ks, &ctx(), &["xx", "x"]).unwrap(), [2.0, 1.0]);
        assert_eq!(m.hits.load(Ordering::SeqCst), 1);
    }

    #[test]
    fn non_2xx_is_transport_and_retried() {
        let m = serve(|_| (503, "busy".into()));
        let c = ScorerClient::new(fast(&m.url)).unwrap();
        let e = c.score(ScoreTask::Ktd, &ctx(), "").unwrap_err();
        assert!(matches!(e, Error::Transport { .. }), "{e}");
        assert_eq!(m.hits.load(Ordering::SeqCst), 2);
    }

    #[test]
    fn malformed_is_protocol_and_not_retried() {
        let m = serve(|_| (200, "{\"score\": 1}".into()));
        let c = ScorerClient::new(fast(&m.url)).unwrap();
        let e = c.score(ScoreTask::Ks, &ctx(), "s").unwrap_err();
        assert!(matches!(e, Error::Protocol { .. }), "{e}");
        assert_eq!(m.hits.load(Ordering::SeqCst), 1);
    }

    #[test]
    fn unreachable_is_transport() {
        let c = ScorerClient::new(EndpointConfig {
            retries: 0,
            ..fast("http://127.0.0.1:9")
        })
        .unwrap();
        assert!(c.score(ScoreTask::Ks, &ctx(), "s").unwrap_err().is_retriable());
    }

    #[test]
    fn absa_reply_checks() {
        let m = serve(|body| {
            let req: AbsaRequest = serde_json::from_str(body).unwrap();
            match req.sentence.as_str() {
                "fun" => (200, r#"{"aspect": "ambience", "polarity": "positive"}"#.into()),
                "none" => (200, r#"{"aspect": null, "polarity": "none"}"#.into()),
                "odd" => (200, r#"{"aspect": "x", "polarity": "great"}"#.into()),
                _ => (200, r#"{"aspect": "", "polarity": "negative"}"#.into()),
            }
        });
        let c = AbsaClient::new(fast(&m.url)).unwrap();
        assert_eq!(c.tag("fun").unwrap(), (Some("ambience".into()), Polarity::Positive));
        assert_eq!(c.tag("none").unwrap(), (None, Polarity::None));
        assert!(matches!(c.tag("odd"), Err(Error::Protocol { .. })));
        assert!(matches!(c.tag("bare"), Err(Error::Protocol { .. })));
    }

    #[test]
    fn empty_generation_is_protocol() {
        let m = serve(|_| (200, r#"{"response": "  "}"#.into()));
        let c = GeneratorClient::new(fast(&m.url)).unwrap();
        let req = GenerateRequest {
            context: wire_context(&ctx()),
            snippets: vec![],
        };
        assert!(matches!(c.generate(&req), Err(Error::Protocol { .. })));
    }
}
