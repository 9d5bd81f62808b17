//! Embedding providers and the similarity gate for hint-prompt variants.
//!
//! Variants are compared against [`crate::prompt::CANONICAL_HINT`] by the
//! dot product of unit-normalized sentence embeddings. Vectors come either
//! from a fixtures file shipped with the repo or from a remote endpoint.

use std::collections::HashMap;
use std::path::Path;
use std::time::Duration;

use serde::Deserialize;

use crate::error::{Error, Result};
use crate::prompt::CANONICAL_HINT;

/// Variants at or above this similarity pass the gate.
pub const DEFAULT_GATE_THRESHOLD: f64 = 0.80;

pub trait EmbeddingProvider {
    /// Returns one vector per input text, all of the same dimension.
    fn embed(&self, texts: &[&str]) -> Result<Vec<Vec<f64>>>;
}

/// Outcome of gating one variant text.
#[derive(Debug, Clone, PartialEq)]
pub struct VariantReport {
    pub variant_text: String,
    pub similarity: f64,
    pub passes_gate: bool,
}

/// Dot product of the unit-normalized vectors. Zero-length inputs are a
/// provider defect and reported as such.
pub fn unit_dot(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::SizeMismatch { left: a.len(), right: b.len() });
    }
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::Embedding("zero-norm embedding vector".into()));
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

/// Scores `variant` against the canonical hint and applies the threshold.
pub fn check_variant(
    variant: &str,
    provider: &dyn EmbeddingProvider,
    threshold: f64,
) -> Result<VariantReport> {
    let vectors = provider.embed(&[variant, CANONICAL_HINT])?;
    if vectors.len() != 2 {
        return Err(Error::Embedding(format!(
            "provider returned {} vectors for 2 texts",
            vectors.len()
        )));
    }
    let similarity = unit_dot(&vectors[0], &vectors[1])?;
    Ok(VariantReport {
        variant_text: variant.to_string(),
        similarity,
        passes_gate: similarity >= threshold,
    })
}

/// Precomputed embeddings read from a line-oriented fixtures file.
///
/// Format: comment lines start with `#`; the first record must be
/// `dim<TAB><n>`; every following record is `<text><TAB><n space-separated
/// floats>`.
#[derive(Debug, Clone)]
pub struct FixtureEmbeddings {
    dim: usize,
    records: HashMap<String, Vec<f64>>,
}

impl FixtureEmbeddings {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let content = std::fs::read_to_string(path)?;
        Self::parse(&content)
    }

    pub fn parse(content: &str) -> Result<Self> {
        let mut dim: Option<usize> = None;
        let mut records = HashMap::new();
        for (lineno, raw) in content.lines().enumerate() {
            let line = lineno + 1;
            if raw.trim().is_empty() || raw.starts_with('#') {
                continue;
            }
            let (head, rest) = raw.split_once('\t').ok_or_else(|| Error::Parse {
                line,
                message: "expected <text><TAB><values>".into(),
            })?;
            if dim.is_none() {
                if head != "dim" {
                    return Err(Error::Parse {
                        line,
                        message: format!("first record must declare dim, got {head:?}"),
                    });
                }
                let n: usize = rest.trim().parse().map_err(|_| Error::Parse {
                    line,
                    message: format!("bad dimension {rest:?}"),
                })?;
                if n == 0 {
                    return Err(Error::Parse { line, message: "dimension must be > 0".into() });
                }
                dim = Some(n);
                continue;
            }
            let d = dim.unwrap();
            let values: Vec<f64> = rest
                .split_whitespace()
                .map(|v| {
                    v.parse::<f64>().map_err(|_| Error::Parse {
                        line,
                        message: format!("bad float {v:?}"),
                    })
                })
                .collect::<Result<_>>()?;
            if values.len() != d {
                return Err(Error::Parse {
                    line,
                    message: format!("expected {d} values, got {}", values.len()),
                });
            }
            records.insert(head.to_string(), values);
        }
        let dim = dim.ok_or_else(|| Error::Parse {
            line: 0,
            message: "missing dim header".into(),
        })?;
        Ok(Self { dim, records })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

impl EmbeddingProvider for FixtureEmbeddings {
    fn embed(&self, texts: &[&str]) -> Result<Vec<Vec<f64>>> {
        texts
            .iter()
            .map(|t| {
                self.records
                    .get(*t)
                    .cloned()
                    .ok_or_else(|| Error::Embedding(format!("no fixture embedding for {t:?}")))
            })
            .collect()
    }
}

#[derive(Debug, Deserialize)]
struct EmbedResponse {
    vectors: Vec<Vec<f64>>,
}

#[derive(Debug, Deserialize)]
struct ErrorBody {
    error: String,
}

/// Client for a remote embedding endpoint: POST `{"texts": [...]}` returns
/// `{"vectors": [[...], ...]}`; failures come back as non-200 with
/// `{"error": "..."}`.
#[derive(Debug, Clone)]
pub struct HttpEmbeddings {
    url: String,
    timeout: Duration,
    auth_token: Option<String>,
}

impl HttpEmbeddings {
    pub fn new(url: impl Into<String>) -> Self {
        Self {
            url: url.into(),
            timeout: Duration::from_secs(10),
            auth_token: None,
        }
    }

    pub fn with_timeout(mut self, timeout: Duration) -> Self {
        self.timeout = timeout;
        self
    }

    pub fn with_auth_token(mut self, token: impl Into<String>) -> Self {
        self.auth_token = Some(token.into());
        self
    }
}

impl EmbeddingProvider for HttpEmbeddings {
    fn embed(&self, texts: &[&str]) -> Result<Vec<Vec<f64>>> {
        let agent = ureq::AgentBuilder::new().timeout(self.timeout).build();
        let mut req = agent.post(&self.url);
        if let Some(token) = &self.auth_token {
            req = req.set("Authorization", &format!("Bearer {token}"));
        }
        let body = serde_json::json!({ "texts": texts });
        let response = match req.send_json(body) {
            Ok(r) => r,
            Err(ureq::Error::Status(code, resp)) => {
                let message = resp
                    .into_json::<ErrorBody>()
                    .map(|b| b.error)
                    .unwrap_or_else(|_| format!("HTTP {code}"));
                return Err(Error::Embedding(message));
            }
            Err(e) => return Err(Error::Embedding(e.to_string())),
        };
        let parsed: EmbedResponse = response
            .into_json()
            .map_err(|e| Error::Embedding(format!("malformed response: {e}")))?;
        if parsed.vectors.len() != texts.len() {
            return Err(Error::Embedding(format!(
                "expected {} vectors, got {}",
                texts.len(),
                parsed.vectors.len()
            )));
        }
        Ok(parsed.vectors)
    }
}
