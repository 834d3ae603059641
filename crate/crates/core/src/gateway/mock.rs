use std::collections::HashMap;
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{Backend, BackendError, GenRequest, GenResponse, Message, ScoreRequest, Usage};

/// Hash of the ordered message list; the fixture key for generations.
pub fn prompt_hash(messages: &[Message]) -> String {
    let body = serde_json::to_string(messages).expect("messages serialize");
    hex::encode(Sha256::digest(body.as_bytes()))
}

/// Fixture key for continuation scores.
pub fn score_hash(context: &str, continuation: &str) -> String {
    let mut hasher = Sha256::new();
    hasher.update((context.len() as u64).to_le_bytes());
    hasher.update(context.as_bytes());
    hasher.update(continuation.as_bytes());
    hex::encode(hasher.finalize())
}

/// One line of a fixture file: a hash mapped to either a completion or a log-probability.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FixtureRecord {
    pub hash: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub logprob: Option<f64>,
}

/// Rule-based fallback consulted when no fixture matches.
pub trait Responder: Send + Sync {
    fn respond(&self, req: &GenRequest) -> Option<String>;
    fn score(&self, _req: &ScoreRequest) -> Option<f64> {
        None
    }
}

/// Deterministic backend: fixture tables first, then an optional [`Responder`].
pub struct MockBackend {
    id: String,
    texts: HashMap<String, String>,
    scores: HashMap<String, f64>,
    responder: Option<Box<dyn Responder>>,
    calls: AtomicU64,
}

impl MockBackend {
    pub fn new(id: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            texts: HashMap::new(),
            scores: HashMap::new(),
            responder: None,
            calls: AtomicU64::new(0),
        }
    }

    pub fn with_responder(mut self, responder: impl Responder + 'static) -> Self {
        self.responder = Some(Box::new(responder));
        self
    }

    pub fn with_fixture(mut self, hash: impl Into<String>, text: impl Into<String>) -> Self {
        self.texts.insert(hash.into(), text.into());
        self
    }

    /// Maps a single-user-message prompt to a reply.
    pub fn reply_to(self, prompt: &str, reply: impl Into<String>) -> Self {
        let hash = prompt_hash(&[Message::user(prompt)]);
        self.with_fixture(hash, reply)
    }

    pub fn with_logprob(mut self, context: &str, continuation: &str, logprob: f64) -> Self {
        self.scores.insert(score_hash(context, continuation), logprob);
        self
    }

    pub fn with_probability(self, context: &str, continuation: &str, p: f64) -> Self {
        self.with_logprob(context, continuation, p.ln())
    }

    /// Loads every `*.jsonl` file under `dir`, in file-name order.
    pub fn load_fixtures(mut self, dir: impl AsRef<Path>) -> std::io::Result<Self> {
        let mut files: Vec<_> = std::fs::read_dir(dir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "jsonl"))
            .collect();
        files.sort();
        for file in files {
            let content = std::fs::read_to_string(&file)?;
            for (idx, line) in content.lines().enumerate() {
                if line.trim().is_empty() {
                    continue;
                }
                let invalid = |msg: String| {
                    std::io::Error::new(
                        std::io::ErrorKind::InvalidData,
                        format!("{}:{}: {msg}", file.display(), idx + 1),
                    )
                };
                let record: FixtureRecord = serde_json::from_str(line).map_err(|e| invalid(e.to_string()))?;
                match (record.text, record.logprob) {
                    (Some(text), None) => {
                        self.texts.insert(record.hash, text);
                    }
                    (None, Some(lp)) => {
                        self.scores.insert(record.hash, lp);
                    }
                    _ => return Err(invalid("exactly one of text/logprob required".into())),
                }
            }
        }
        Ok(self)
    }

    pub fn calls(&self) -> u64 {
        self.calls.load(Ordering::SeqCst)
    }
}

impl Backend for MockBackend {
    fn id(&self) -> &str {
        &self.id
    }

    fn generate(&self, req: &GenRequest) -> Result<GenResponse, BackendError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        let hash = prompt_hash(&req.messages);
        let text = self
            .texts
            .get(&hash)
            .cloned()
            .or_else(|| self.responder.as_ref().and_then(|r| r.respond(req)))
            .ok_or(BackendError::MissingFixture(hash))?;
        Ok(GenResponse {
            usage: Usage {
                prompt_tokens: req
                    .messages
                    .iter()
                    .map(|m| m.content.split_whitespace().count())
                    .sum::<usize>() as u32,
                completion_tokens: text.split_whitespace().count() as u32,
            },
            text,
            token_logprobs: None,
            backend_id: self.id.clone(),
        })
    }

    fn score(&self, req: &ScoreRequest) -> Result<f64, BackendError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        let hash = score_hash(&req.context, &req.continuation);
        self.scores
            .get(&hash)
            .copied()
            .or_else(|| self.responder.as_ref().and_then(|r| r.score(req)))
            .ok_or(BackendError::MissingFixture(hash))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::{answerability_weight, scoring_context, LlmGateway, ResponseCache};

    #[test]
    fn fixture_reply_and_cache_hit() {
        let backend = MockBackend::new("mock").reply_to("say hi", "hello");
        let gw = LlmGateway::builder(backend).cache(ResponseCache::in_memory()).build();
        let req = GenRequest::new("m", vec![Message::user("say hi")]);
        assert_eq!(gw.generate(&req).unwrap().text, "hello");
        let before = gw.stats().backend_calls;
        let second = gw.generate(&req).unwrap();
        assert_eq!(second.text, "hello");
        assert_eq!(gw.stats().backend_calls, before);
        assert_eq!(gw.stats().cache_hits, 1);
    }

    #[test]
    fn missing_fixture_is_an_error() {
        let gw = LlmGateway::builder(MockBackend::new("mock")).build();
        let err = gw.generate(&GenRequest::new("m", vec![Message::user("?")])).unwrap_err();
        assert!(err.to_string().contains("no mock response"));
    }

    fn score(gw: &LlmGateway, ctx: &str, cont: &str) -> f64 {
        gw.score_continuation(&ScoreRequest {
            model_id: "m".into(),
            context: ctx.into(),
            continuation: cont.into(),
        })
        .unwrap()
    }

    #[test]
    fn score_examples() {
        let backend = MockBackend::new("mock")
            .with_probability("c", "sure", 1.0)
            .with_probability("c", "quarter", 0.25)
            .with_probability("c", "half", 0.5);
        let gw = LlmGateway::builder(backend).build();
        assert_eq!(score(&gw, "c", "sure"), 0.0);
        assert!((score(&gw, "c", "quarter") - (-1.3862943611198906)).abs() < 1e-9);
        let diff = score(&gw, "c", "half") - score(&gw, "c", "quarter");
        assert!((diff - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn answerability_weight_examples() {
        let (q, a) = ("who?", "ann");
        let ctx = |docs: &str| scoring_context(q, docs);
        let cont = format!(" {a}");
        let backend = MockBackend::new("mock")
            .with_probability(&ctx("orig"), &cont, 0.4)
            .with_probability(&ctx("better"), &cont, 0.8)
            .with_probability(&ctx("worse"), &cont, 0.1);
        let gw = LlmGateway::builder(backend).build();
        let w = |docs: &str| answerability_weight(&gw, "m", q, "orig", docs, a).unwrap();
        assert_eq!(w("orig"), 1.0);
        assert!((w("better") - 2.0).abs() < 1e-12);
        assert!((w("worse") - 0.25).abs() < 1e-12);
    }

    #[test]
    fn positive_scores_are_rejected() {
        let gw = LlmGateway::builder(MockBackend::new("mock").with_logprob("c", "x", 0.5)).build();
        assert!(gw
            .score_continuation(&ScoreRequest {
                model_id: "m".into(),
                context: "c".into(),
                continuation: "x".into()
            })
            .is_err());
    }

    #[test]
    fn fixtures_load_from_directory() {
        let dir = tempfile::tempdir().unwrap();
        let hash = prompt_hash(&[Message::user("ping")]);
        let lines = [
            serde_json::to_string(&FixtureRecord { hash, text: Some("pong".into()), logprob: None }).unwrap(),
            serde_json::to_string(&FixtureRecord {
                hash: score_hash("c", "x"),
                text: None,
                logprob: Some(-2.0),
            })
            .unwrap(),
        ];
        std::fs::write(dir.path().join("a.jsonl"), lines.join("\n")).unwrap();
        std::fs::write(dir.path().join("ignored.txt"), "not a fixture").unwrap();
        let gw = LlmGateway::builder(MockBackend::new("mock").load_fixtures(dir.path()).unwrap()).build();
        assert_eq!(gw.generate(&GenRequest::new("m", vec![Message::user("ping")])).unwrap().text, "pong");
        assert_eq!(score(&gw, "c", "x"), -2.0);

        std::fs::write(dir.path().join("b.jsonl"), "{\"hash\":\"h\"}\n").unwrap();
        assert!(MockBackend::new("mock").load_fixtures(dir.path()).is_err());
    }
}
