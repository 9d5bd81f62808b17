//! Client for the v1 logits wire protocol.
//!
//! `GET /v1/vocab` returns `{"version": "1", "tokens": [...], "eos": "..."}`
//! (`eos` may be omitted when the vocabulary contains a literal `<eos>`
//! token). `POST /v1/logits` takes `{"context": "...", "prefix": [...]}`
//! and returns `{"logits": {token: value, ...}}` covering every vocabulary
//! token, or a partial map plus an explicit `"default"` value.

#![allow(clippy::result_large_err)]

use std::collections::HashMap;
use std::time::Duration;

use serde::Deserialize;

use crate::dist::{LogitVector, Vocabulary};
use crate::error::{Error, Result};

use super::NextTokenProvider;

/// Protocol version this client speaks.
pub const PROTOCOL_VERSION: &str = "1";

const DEFAULT_EOS: &str = "<eos>";

#[derive(Debug, Clone)]
pub struct LogitEndpointConfig {
    pub base_url: String,
    pub timeout: Duration,
    pub max_retries: u32,
    pub auth_token: Option<String>,
}

impl LogitEndpointConfig {
    pub fn new(base_url: impl Into<String>) -> Self {
        Self {
            base_url: base_url.into(),
            timeout: Duration::from_secs(10),
            max_retries: 2,
            auth_token: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.max_retries > 5 {
            return Err(Error::InvalidConfig(format!(
                "max_retries must be <= 5, got {}",
                self.max_retries
            )));
        }
        if self.timeout.is_zero() {
            return Err(Error::InvalidConfig("timeout must be > 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Deserialize)]
struct VocabResponse {
    version: String,
    tokens: Vec<String>,
    #[serde(default)]
    eos: Option<String>,
}

#[derive(Debug, Deserialize)]
struct LogitsResponse {
    logits: HashMap<String, f64>,
    #[serde(default)]
    default: Option<f64>,
}

fn agent_for(config: &LogitEndpointConfig) -> ureq::Agent {
    ureq::AgentBuilder::new()
        .timeout(config.timeout)
        .build()
}

/// Issues one request with the configured retry budget. Transport failures
/// and 5xx responses are retried; other statuses fail immediately.
fn with_retries<T>(
    config: &LogitEndpointConfig,
    mut call: impl FnMut() -> std::result::Result<T, ureq::Error>,
) -> Result<T> {
    let attempts = config.max_retries + 1;
    let mut last_error = String::new();
    for _ in 0..attempts {
        match call() {
            Ok(v) => return Ok(v),
            Err(ureq::Error::Status(code, resp)) if code < 500 => {
                let body = resp.into_string().unwrap_or_default();
                return Err(Error::Backend(format!("HTTP {code}: {body}")));
            }
            Err(e) => last_error = e.to_string(),
        }
    }
    Err(Error::BackendExhausted { attempts, message: last_error })
}

/// Fetches the server's declared vocabulary and protocol version, refusing
/// mismatched versions.
pub fn endpoint_probe(config: &LogitEndpointConfig) -> Result<(Vocabulary, String)> {
    config.validate()?;
    let agent = agent_for(config);
    let url = format!("{}/v1/vocab", config.base_url.trim_end_matches('/'));
    let response = with_retries(config, || {
        let mut req = agent.get(&url);
        if let Some(token) = &config.auth_token {
            req = req.set("Authorization", &format!("Bearer {token}"));
        }
        req.call()
    })?;
    let parsed: VocabResponse = response
        .into_json()
        .map_err(|e| Error::Backend(format!("malformed vocab response: {e}")))?;
    if parsed.version != PROTOCOL_VERSION {
        return Err(Error::ProtocolMismatch {
            server: parsed.version,
            client: PROTOCOL_VERSION.to_string(),
        });
    }
    let eos = parsed.eos.unwrap_or_else(|| DEFAULT_EOS.to_string());
    let vocab = Vocabulary::new(parsed.tokens, &eos)
        .map_err(|e| Error::Backend(format!("server vocabulary rejected: {e}")))?;
    Ok((vocab, parsed.version))
}

/// Provider backed by a remote logit server. The vocabulary is fetched once
/// at connection time and fixed afterwards.
pub struct HttpBackend {
    config: LogitEndpointConfig,
    vocab: Vocabulary,
    agent: ureq::Agent,
}

impl HttpBackend {
    pub fn connect(config: LogitEndpointConfig) -> Result<Self> {
        let (vocab, _version) = endpoint_probe(&config)?;
        let agent = agent_for(&config);
        Ok(Self { config, vocab, agent })
    }
}

impl NextTokenProvider for HttpBackend {
    fn vocabulary(&self) -> &Vocabulary {
        &self.vocab
    }

    fn next_logits(&self, context: &str, prefix: &[String]) -> Result<LogitVector> {
        for tok in prefix {
            if self.vocab.id(tok).is_none() {
                return Err(Error::UnknownToken { token: tok.clone() });
            }
        }
        let url = format!("{}/v1/logits", self.config.base_url.trim_end_matches('/'));
        let body = serde_json::json!({ "context": context, "prefix": prefix });
        let response = with_retries(&self.config, || {
            let mut req = self.agent.post(&url);
            if let Some(token) = &self.config.auth_token {
                req = req.set("Authorization", &format!("Bearer {token}"));
            }
            req.send_json(body.clone())
        })?;
        let parsed: LogitsResponse = response
            .into_json()
            .map_err(|e| Error::Backend(format!("malformed logits response: {e}")))?;
        let values = self
            .vocab
            .tokens()
            .iter()
            .map(|tok| {
                parsed
                    .logits
                    .get(tok)
                    .copied()
                    .or(parsed.default)
                    .ok_or_else(|| {
                        Error::Backend(format!("server omitted token {tok:?} and no default given"))
                    })
            })
            .collect::<Result<Vec<f64>>>()?;
        LogitVector::new(values)
    }
}
