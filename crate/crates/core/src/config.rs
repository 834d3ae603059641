//! TOML run configuration.
//!
//! ```toml
//! [backend]
//! kind = "openai"                  # or "mock"
//! base_url = "http://localhost:8000/v1"
//!
//! [gateway]
//! concurrency = 8
//! cache_path = "cache/responses.jsonl"
//!
//! [decoding]
//! max_tokens = 64
//! ```

use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::gateway::{HttpBackend, HttpConfig, LlmGateway, MockBackend, ResponseCache, RetryPolicy};
use crate::preference::{CompositionPolicy, Family, DEFAULT_PAIR_CAP};
use crate::synthetic::{StudentMode, SyntheticResponder};

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid config: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    Openai,
    #[default]
    Mock,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MockFallback {
    /// Rule-based synthetic model for prompts without a fixture.
    #[default]
    Synthetic,
    /// Missing fixtures are errors.
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SyntheticStudent {
    #[default]
    Identity,
    Filter,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackendConfig {
    pub kind: BackendKind,
    pub base_url: Option<String>,
    /// Completions route used for scoring; empty disables scoring.
    pub score_route: Option<String>,
    pub request_logprobs: bool,
    pub timeout_secs: u64,
    pub fixtures: Option<PathBuf>,
    pub fallback: MockFallback,
    pub synthetic_student: SyntheticStudent,
}

impl Default for BackendConfig {
    fn default() -> Self {
        Self {
            kind: BackendKind::Mock,
            base_url: None,
            score_route: Some("/completions".into()),
            request_logprobs: false,
            timeout_secs: 120,
            fixtures: None,
            fallback: MockFallback::Synthetic,
            synthetic_student: SyntheticStudent::Identity,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GatewayConfig {
    pub concurrency: usize,
    pub max_retries: u32,
    pub base_delay_ms: u64,
    pub max_delay_ms: u64,
    pub cache_path: Option<PathBuf>,
}

impl Default for GatewayConfig {
    fn default() -> Self {
        let retry = RetryPolicy::default();
        Self {
            concurrency: 8,
            max_retries: retry.max_retries,
            base_delay_ms: retry.base_delay.as_millis() as u64,
            max_delay_ms: retry.max_delay.as_millis() as u64,
            cache_path: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecodingConfig {
    pub temperature: f64,
    pub max_tokens: u32,
    pub rewrite_max_tokens: u32,
    pub seed: Option<u64>,
}

impl Default for DecodingConfig {
    fn default() -> Self {
        Self { temperature: 0.0, max_tokens: 64, rewrite_max_tokens: 1024, seed: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PreferenceConfig {
    /// Pairs kept per example; 0 keeps all.
    pub pair_cap: usize,
    pub admit_singletons: bool,
    /// Sets kept per composition family; 0 keeps all.
    pub per_family_cap: usize,
    pub families: Vec<Family>,
}

impl Default for PreferenceConfig {
    fn default() -> Self {
        let policy = CompositionPolicy::default();
        Self {
            pair_cap: DEFAULT_PAIR_CAP,
            admit_singletons: false,
            per_family_cap: policy.per_family_cap.unwrap_or(0),
            families: policy.families,
        }
    }
}

impl PreferenceConfig {
    pub fn policy(&self) -> CompositionPolicy {
        CompositionPolicy {
            families: self.families.clone(),
            min_size: if self.admit_singletons { 1 } else { 2 },
            per_family_cap: (self.per_family_cap > 0).then_some(self.per_family_cap),
        }
    }

    pub fn pair_cap(&self) -> Option<usize> {
        (self.pair_cap > 0).then_some(self.pair_cap)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub backend: BackendConfig,
    pub gateway: GatewayConfig,
    pub decoding: DecodingConfig,
    pub preference: PreferenceConfig,
}

impl Config {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let config: Config = toml::from_str(text)?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ConfigError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|source| ConfigError::Io { path: path.to_owned(), source })?;
        Self::from_toml(&text)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.backend.kind == BackendKind::Openai && self.backend.base_url.is_none() {
            return Err(ConfigError::Invalid("backend.base_url is required for kind = \"openai\"".into()));
        }
        if self.gateway.concurrency == 0 {
            return Err(ConfigError::Invalid("gateway.concurrency must be >= 1".into()));
        }
        if !(0.0..=2.0).contains(&self.decoding.temperature) {
            return Err(ConfigError::Invalid("decoding.temperature must be in [0, 2]".into()));
        }
        if self.decoding.max_tokens == 0 || self.decoding.rewrite_max_tokens == 0 {
            return Err(ConfigError::Invalid("max token limits must be >= 1".into()));
        }
        Ok(())
    }

    pub fn retry_policy(&self) -> RetryPolicy {
        RetryPolicy {
            max_retries: self.gateway.max_retries,
            base_delay: Duration::from_millis(self.gateway.base_delay_ms),
            max_delay: Duration::from_millis(self.gateway.max_delay_ms),
        }
    }

    /// Builds a gateway over the configured backend, with its cache and limits.
    pub fn build_gateway(&self) -> Result<LlmGateway, ConfigError> {
        let b = &self.backend;
        let builder = match b.kind {
            BackendKind::Openai => {
                let mut http = HttpConfig::new(b.base_url.clone().unwrap_or_default());
                http.score_route = b.score_route.clone().filter(|r| !r.is_empty());
                http.timeout = Duration::from_secs(b.timeout_secs);
                http.request_logprobs = b.request_logprobs;
                LlmGateway::builder(HttpBackend::new(http))
            }
            BackendKind::Mock => {
                let mut mock = MockBackend::new("mock");
                if let Some(dir) = &b.fixtures {
                    mock = mock
                        .load_fixtures(dir)
                        .map_err(|source| ConfigError::Io { path: dir.clone(), source })?;
                }
                if b.fallback == MockFallback::Synthetic {
                    let student = match b.synthetic_student {
                        SyntheticStudent::Identity => StudentMode::Identity,
                        SyntheticStudent::Filter => StudentMode::Filter,
                    };
                    mock = mock.with_responder(SyntheticResponder::new(student));
                }
                LlmGateway::builder(mock)
            }
        };
        let mut builder = builder.retry(self.retry_policy()).concurrency(self.gateway.concurrency);
        if let Some(path) = &self.gateway.cache_path {
            let cache = ResponseCache::open(path).map_err(|e| ConfigError::Invalid(e.to_string()))?;
            builder = builder.cache(cache);
        }
        Ok(builder.build())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_config_is_the_default() {
        assert_eq!(Config::from_toml("").unwrap(), Config::default());
    }

    #[test]
    fn full_config_parses() {
        let c = Config::from_toml(
            r#"
            [backend]
            kind = "openai"
            base_url = "http://localhost:8000/v1"
            score_route = ""
            [gateway]
            concurrency = 2
            max_retries = 0
            cache_path = "cache.jsonl"
            [decoding]
            max_tokens = 32
            seed = 7
            [preference]
            pair_cap = 0
            admit_singletons = true
            families = ["a_only", "other_c"]
            "#,
        )
        .unwrap();
        assert_eq!(c.backend.kind, BackendKind::Openai);
        assert_eq!(c.gateway.concurrency, 2);
        assert_eq!(c.decoding.seed, Some(7));
        assert_eq!(c.preference.pair_cap(), None);
        assert_eq!(c.preference.policy().min_size, 1);
        assert_eq!(c.preference.policy().families, vec![Family::AOnly, Family::OtherC]);
    }

    #[test]
    fn invalid_configs() {
        assert!(Config::from_toml("[backend]\nkind = \"openai\"").is_err());
        assert!(Config::from_toml("[gateway]\nconcurrency = 0").is_err());
        assert!(Config::from_toml("[gateway]\nunknown = 1").is_err());
        assert!(Config::from_toml("[decoding]\ntemperature = 5.0").is_err());
    }

    #[test]
    fn mock_gateway_uses_synthetic_fallback() {
        let gw = Config::default().build_gateway().unwrap();
        assert_eq!(gw.backend_id(), "mock");
        let req = crate::gateway::GenRequest::new(
            "m",
            vec![crate::gateway::Message::user(crate::prompts::render_answer("q", &[]))],
        );
        assert_eq!(gw.generate(&req).unwrap().text, "unknown");
    }
}
