use std::time::Duration;

use serde::Deserialize;
use serde_json::{json, Value};

use super::{Backend, BackendError, GenRequest, GenResponse, ScoreRequest, TokenLogprob, Usage};

pub const API_KEY_ENV: &str = "BRIDGELAB_API_KEY";

#[derive(Debug, Clone)]
pub struct HttpConfig {
    pub id: String,
    /// e.g. `http://localhost:8000/v1`
    pub base_url: String,
    pub api_key: Option<String>,
    /// Route of an echo-capable completions endpoint; `None` disables scoring.
    pub score_route: Option<String>,
    pub timeout: Duration,
    pub request_logprobs: bool,
}

impl HttpConfig {
    pub fn new(base_url: impl Into<String>) -> Self {
        let base_url = base_url.into();
        Self {
            id: format!("openai:{base_url}"),
            base_url,
            api_key: std::env::var(API_KEY_ENV).ok().filter(|k| !k.is_empty()),
            score_route: Some("/completions".into()),
            timeout: Duration::from_secs(120),
            request_logprobs: false,
        }
    }
}

/// Client for OpenAI-compatible `/chat/completions` plus echo-logprob scoring.
pub struct HttpBackend {
    config: HttpConfig,
    agent: ureq::Agent,
}

#[derive(Deserialize)]
struct ChatResponse {
    choices: Vec<ChatChoice>,
    #[serde(default)]
    usage: Option<Usage>,
}

#[derive(Deserialize)]
struct ChatChoice {
    message: ChatMessage,
    #[serde(default)]
    logprobs: Option<ChatLogprobs>,
}

#[derive(Deserialize)]
struct ChatMessage {
    #[serde(default)]
    content: Option<String>,
}

#[derive(Deserialize)]
struct ChatLogprobs {
    #[serde(default)]
    content: Option<Vec<TokenLogprob>>,
}

#[derive(Deserialize)]
struct CompletionResponse {
    choices: Vec<CompletionChoice>,
}

#[derive(Deserialize)]
struct CompletionChoice {
    #[serde(default)]
    logprobs: Option<EchoLogprobs>,
}

#[derive(Deserialize)]
struct EchoLogprobs {
    tokens: Vec<String>,
    token_logprobs: Vec<Option<f64>>,
    text_offset: Vec<usize>,
}

impl HttpBackend {
    pub fn new(config: HttpConfig) -> Self {
        let agent = ureq::AgentBuilder::new().timeout(config.timeout).build();
        Self { config, agent }
    }

    fn url(&self, route: &str) -> String {
        format!("{}{}", self.config.base_url.trim_end_matches('/'), route)
    }

    fn post(&self, route: &str, body: &Value) -> Result<Value, BackendError> {
        let mut request = self.agent.post(&self.url(route));
        if let Some(key) = &self.config.api_key {
            request = request.set("Authorization", &format!("Bearer {key}"));
        }
        match request.send_json(body) {
            Ok(resp) => resp.into_json::<Value>().map_err(|e| BackendError::Malformed(e.to_string())),
            Err(ureq::Error::Status(429, resp)) => Err(BackendError::RateLimited {
                retry_after: resp
                    .header("Retry-After")
                    .and_then(|v| v.trim().parse::<f64>().ok())
                    .filter(|s| s.is_finite() && *s >= 0.0)
                    .map(Duration::from_secs_f64),
            }),
            Err(ureq::Error::Status(status, resp)) => {
                Err(BackendError::Status { status, body: resp.into_string().unwrap_or_default() })
            }
            Err(ureq::Error::Transport(t)) => {
                let msg = t.to_string();
                if msg.contains("timed out") {
                    Err(BackendError::Timeout)
                } else {
                    Err(BackendError::Transport(msg))
                }
            }
        }
    }
}

impl Backend for HttpBackend {
    fn id(&self) -> &str {
        &self.config.id
    }

    fn generate(&self, req: &GenRequest) -> Result<GenResponse, BackendError> {
        let mut body = json!({
            "model": req.model_id,
            "messages": req.messages,
            "temperature": req.temperature,
            "max_tokens": req.max_tokens,
        });
        if let Some(seed) = req.seed {
            body["seed"] = json!(seed);
        }
        if self.config.request_logprobs {
            body["logprobs"] = json!(true);
        }
        let raw = self.post("/chat/completions", &body)?;
        let parsed: ChatResponse =
            serde_json::from_value(raw).map_err(|e| BackendError::Malformed(e.to_string()))?;
        let choice =
            parsed.choices.into_iter().next().ok_or_else(|| BackendError::Malformed("no choices".into()))?;
        let token_logprobs = choice.logprobs.and_then(|l| l.content);
        if let Some(lps) = &token_logprobs {
            if lps.iter().any(|t| t.logprob > 0.0 || t.logprob.is_nan()) {
                return Err(BackendError::Malformed("token logprob > 0".into()));
            }
        }
        Ok(GenResponse {
            text: choice.message.content.unwrap_or_default(),
            token_logprobs,
            usage: parsed.usage.unwrap_or_default(),
            backend_id: self.config.id.clone(),
        })
    }

    fn score(&self, req: &ScoreRequest) -> Result<f64, BackendError> {
        let route = self
            .config
            .score_route
            .as_deref()
            .ok_or_else(|| BackendError::Unsupported("continuation scoring".into()))?;
        let body = json!({
            "model": req.model_id,
            "prompt": format!("{}{}", req.context, req.continuation),
            "max_tokens": 0,
            "echo": true,
            "logprobs": 1,
            "temperature": 0.0,
        });
        let raw = match self.post(route, &body) {
            Err(BackendError::Status { status: 404, .. }) => {
                return Err(BackendError::Unsupported(format!("scoring route {route}")))
            }
            other => other?,
        };
        let parsed: CompletionResponse =
            serde_json::from_value(raw).map_err(|e| BackendError::Malformed(e.to_string()))?;
        let logprobs = parsed
            .choices
            .into_iter()
            .next()
            .and_then(|c| c.logprobs)
            .ok_or_else(|| BackendError::Unsupported("echo logprobs".into()))?;
        sum_continuation(&logprobs, req.context.chars().count())
    }
}

fn sum_continuation(lp: &EchoLogprobs, context_chars: usize) -> Result<f64, BackendError> {
    if lp.tokens.len() != lp.token_logprobs.len() || lp.tokens.len() != lp.text_offset.len() {
        return Err(BackendError::Malformed("logprob arrays differ in length".into()));
    }
    let mut total = 0.0;
    let mut counted = 0;
    for ((token, logprob), offset) in lp.tokens.iter().zip(&lp.token_logprobs).zip(&lp.text_offset) {
        let end = offset + token.chars().count();
        if *offset >= context_chars {
            let value = logprob.ok_or_else(|| BackendError::Malformed("null continuation logprob".into()))?;
            total += value;
            counted += 1;
        } else if end > context_chars {
            return Err(BackendError::Unsupported(
                "token straddles the context/continuation boundary".into(),
            ));
        }
    }
    if counted == 0 {
        return Err(BackendError::Malformed("no continuation tokens echoed".into()));
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn echo(tokens: &[&str], lps: &[Option<f64>]) -> EchoLogprobs {
        let mut offset = 0;
        let mut offsets = Vec::new();
        for t in tokens {
            offsets.push(offset);
            offset += t.chars().count();
        }
        EchoLogprobs {
            tokens: tokens.iter().map(|s| s.to_string()).collect(),
            token_logprobs: lps.to_vec(),
            text_offset: offsets,
        }
    }

    #[test]
    fn sums_only_continuation_tokens() {
        let lp = echo(&["Answer", ":", " ann", " lee"], &[None, Some(-1.0), Some(-0.5), Some(-0.25)]);
        assert_eq!(sum_continuation(&lp, "Answer:".len()).unwrap(), -0.75);
    }

    #[test]
    fn straddling_token_is_rejected() {
        let lp = echo(&["Answer", ": ann"], &[None, Some(-1.0)]);
        assert!(matches!(sum_continuation(&lp, "Answer:".len()), Err(BackendError::Unsupported(_))));
    }
}
