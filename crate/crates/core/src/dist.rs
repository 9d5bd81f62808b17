//! Vocabulary-indexed probability math: normalization, temperature, nucleus
//! truncation, the query-contrastive combination, and seeded sampling.
//!
//! Everything here is a pure function over value inputs; masked tokens are
//! represented as `-inf` logits and zero probabilities.

use std::collections::HashMap;

use rand::Rng;

use crate::error::{Error, Result};

/// Floor for `ln(sub[i])` when `sub[i] = 0` but `full[i] > 0`. Keeps the
/// contrastive amplification bounded instead of producing `+inf`.
pub const SUB_PROB_FLOOR: f64 = 1e-12;

/// Tolerance for "sums to one" checks on distributions.
pub const NORMALIZATION_TOL: f64 = 1e-9;

/// Dense token index: token strings map to ids `0..len()`.
#[derive(Debug, Clone)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
    eos_id: usize,
}

impl Vocabulary {
    /// Builds a vocabulary from unique token strings. `eos` must be one of
    /// them and at least two tokens are required.
    pub fn new<S: Into<String>>(tokens: Vec<S>, eos: &str) -> Result<Self> {
        let tokens: Vec<String> = tokens.into_iter().map(Into::into).collect();
        if tokens.len() < 2 {
            return Err(Error::InvalidVocabulary(format!(
                "need at least 2 tokens, got {}",
                tokens.len()
            )));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (id, tok) in tokens.iter().enumerate() {
            if index.insert(tok.clone(), id).is_some() {
                return Err(Error::InvalidVocabulary(format!("duplicate token {tok:?}")));
            }
        }
        let eos_id = *index
            .get(eos)
            .ok_or_else(|| Error::InvalidVocabulary(format!("eos token {eos:?} not in vocab")))?;
        Ok(Self { tokens, index, eos_id })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn token(&self, id: usize) -> &str {
        &self.tokens[id]
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn eos_id(&self) -> usize {
        self.eos_id
    }
}

/// A normalized probability vector over token ids.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenDistribution {
    probs: Vec<f64>,
}

impl TokenDistribution {
    /// Validates that every entry is `>= 0` and the vector sums to 1 within
    /// [`NORMALIZATION_TOL`].
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::InvalidDistribution("empty vector".into()));
        }
        for (i, &p) in probs.iter().enumerate() {
            if !p.is_finite() || p < 0.0 {
                return Err(Error::InvalidDistribution(format!(
                    "entry {i} is {p}, expected a finite value >= 0"
                )));
            }
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > NORMALIZATION_TOL {
            return Err(Error::InvalidDistribution(format!(
                "entries sum to {sum}, expected 1"
            )));
        }
        Ok(Self { probs })
    }

    pub fn vocab_size(&self) -> usize {
        self.probs.len()
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn get(&self, id: usize) -> f64 {
        self.probs[id]
    }

    /// Index of the largest entry, ties broken by lowest id.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &p) in self.probs.iter().enumerate() {
            if p > self.probs[best] {
                best = i;
            }
        }
        best
    }

    pub fn in_support(&self, id: usize) -> bool {
        self.probs[id] > 0.0
    }

    /// Natural log of each entry; zero entries become `-inf`.
    pub fn to_logits(&self) -> LogitVector {
        LogitVector {
            values: self
                .probs
                .iter()
                .map(|&p| if p > 0.0 { p.ln() } else { f64::NEG_INFINITY })
                .collect(),
        }
    }
}

/// Unnormalized natural-log scores. `-inf` marks a masked token; `NaN` and
/// `+inf` are rejected at construction.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitVector {
    values: Vec<f64>,
}

impl LogitVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::InvalidLogits("empty vector".into()));
        }
        for (i, &v) in values.iter().enumerate() {
            if v.is_nan() || v == f64::INFINITY {
                return Err(Error::InvalidLogits(format!("entry {i} is {v}")));
            }
        }
        Ok(Self { values })
    }

    pub fn vocab_size(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }
}

/// Which space the contrastive combination operates in.
///
/// `Log` is the default: the combination runs on log-probabilities, so a
/// zero contrast weight leaves the full distribution untouched. `Prob`
/// applies the surface formula to raw probabilities instead and is exposed
/// for side-by-side comparison.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CombineSpace {
    Log,
    Prob,
}

/// Contrastive-decoding knobs. Defaults: `alpha = 0.5`, log space,
/// `temperature = 0.7`, `top_p = 0.9`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QcdConfig {
    pub alpha: f64,
    pub space: CombineSpace,
    pub temperature: f64,
    pub top_p: f64,
}

impl Default for QcdConfig {
    fn default() -> Self {
        Self {
            alpha: 0.5,
            space: CombineSpace::Log,
            temperature: 0.7,
            top_p: 0.9,
        }
    }
}

impl QcdConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.alpha.is_finite() || self.alpha < 0.0 {
            return Err(Error::InvalidConfig(format!("alpha must be >= 0, got {}", self.alpha)));
        }
        if !self.temperature.is_finite() || self.temperature <= 0.0 {
            return Err(Error::InvalidConfig(format!(
                "temperature must be > 0, got {}",
                self.temperature
            )));
        }
        if !self.top_p.is_finite() || self.top_p <= 0.0 || self.top_p > 1.0 {
            return Err(Error::InvalidConfig(format!(
                "top_p must be in (0, 1], got {}",
                self.top_p
            )));
        }
        Ok(())
    }
}

/// Max-shifted softmax. Masked (`-inf`) entries map to probability zero;
/// a fully masked vector is an error.
pub fn softmax(logits: &LogitVector) -> Result<TokenDistribution> {
    let max = logits
        .values
        .iter()
        .copied()
        .filter(|v| v.is_finite())
        .fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return Err(Error::EmptySupport);
    }
    let mut probs: Vec<f64> = logits
        .values
        .iter()
        .map(|&v| if v.is_finite() { (v - max).exp() } else { 0.0 })
        .collect();
    let sum: f64 = probs.iter().sum();
    for p in &mut probs {
        *p /= sum;
    }
    Ok(TokenDistribution { probs })
}

/// Combines the full-input and query-omitted distributions.
///
/// Log space: softmax over `(1 + alpha) * ln(full[i]) - alpha * ln(sub[i])`,
/// where `full[i] = 0` masks the token and `ln(sub[i])` is floored at
/// `ln(SUB_PROB_FLOOR)` so a vanishing sub probability cannot blow up the
/// amplification. Prob space: softmax over
/// `(1 + alpha) * full[i] - alpha * sub[i]` applied literally.
pub fn qcd_combine(
    full: &TokenDistribution,
    sub: &TokenDistribution,
    cfg: &QcdConfig,
) -> Result<TokenDistribution> {
    if full.vocab_size() != sub.vocab_size() {
        return Err(Error::SizeMismatch {
            left: full.vocab_size(),
            right: sub.vocab_size(),
        });
    }
    cfg.validate()?;
    let alpha = cfg.alpha;
    let values: Vec<f64> = match cfg.space {
        CombineSpace::Log => full
            .probs
            .iter()
            .zip(&sub.probs)
            .map(|(&f, &s)| {
                if f == 0.0 {
                    f64::NEG_INFINITY
                } else {
                    (1.0 + alpha) * f.ln() - alpha * s.max(SUB_PROB_FLOOR).ln()
                }
            })
            .collect(),
        CombineSpace::Prob => full
            .probs
            .iter()
            .zip(&sub.probs)
            .map(|(&f, &s)| (1.0 + alpha) * f - alpha * s)
            .collect(),
    };
    softmax(&LogitVector { values })
}

/// Scales logits by `1 / t`. Masked entries stay masked.
pub fn apply_temperature(logits: &LogitVector, t: f64) -> Result<LogitVector> {
    if !t.is_finite() || t <= 0.0 {
        return Err(Error::InvalidConfig(format!("temperature must be > 0, got {t}")));
    }
    Ok(LogitVector {
        values: logits.values.iter().map(|&v| v / t).collect(),
    })
}

/// Nucleus truncation: keeps the smallest prefix of tokens (sorted by
/// descending probability, ties broken by lower id) whose cumulative mass
/// reaches `p`, zeroes the rest, and renormalizes. Always keeps at least
/// one token.
pub fn apply_top_p(dist: &TokenDistribution, p: f64) -> Result<TokenDistribution> {
    if !p.is_finite() || p <= 0.0 || p > 1.0 {
        return Err(Error::InvalidConfig(format!("top_p must be in (0, 1], got {p}")));
    }
    let mut order: Vec<usize> = (0..dist.vocab_size()).collect();
    order.sort_by(|&a, &b| {
        dist.probs[b]
            .partial_cmp(&dist.probs[a])
            .expect("probabilities are finite")
            .then(a.cmp(&b))
    });
    let mut keep = vec![false; dist.vocab_size()];
    let mut cum = 0.0;
    for &id in &order {
        keep[id] = true;
        cum += dist.probs[id];
        if cum >= p {
            break;
        }
    }
    let kept_mass: f64 = dist
        .probs
        .iter()
        .zip(&keep)
        .filter(|(_, &k)| k)
        .map(|(&p, _)| p)
        .sum();
    let probs = dist
        .probs
        .iter()
        .zip(&keep)
        .map(|(&p, &k)| if k { p / kept_mass } else { 0.0 })
        .collect();
    Ok(TokenDistribution { probs })
}

/// Draws a token id proportionally to the distribution via inverse-CDF walk.
/// The same generator state and distribution always yield the same id.
pub fn sample<R: Rng>(dist: &TokenDistribution, rng: &mut R) -> usize {
    let u: f64 = rng.gen();
    let mut cum = 0.0;
    let mut last_positive = 0;
    for (id, &p) in dist.probs.iter().enumerate() {
        if p <= 0.0 {
            continue;
        }
        last_positive = id;
        cum += p;
        if u < cum {
            return id;
        }
    }
    // Rounding can leave cum marginally below 1; fall back to the last
    // token with positive mass.
    last_positive
}

/// Greedy mode: argmax, ties broken by lowest id.
pub fn sample_greedy(dist: &TokenDistribution) -> usize {
    dist.argmax()
}
