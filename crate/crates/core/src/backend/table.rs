//! A file-defined toy language model.
//!
//! The model resolves each step through an ordered rule table (first match
//! wins, uniform fallback), optionally mixes the result toward a designated
//! prior distribution, and optionally boosts query-aligned tokens when the
//! hint marker is present. The knobs make prior-dominated behavior and
//! hint sensitivity reproducible at desk scale with exact arithmetic.
//!
//! File format (see `docs/formats.md` for the full grammar):
//!
//! ```text
//! [VOCAB]
//! tokens = apple red green <eos>
//! eos = <eos>
//! [PRIOR]
//! red = 0.8
//! green = 0.2
//! [PARAMS]
//! prior_bias = 0.7
//! compliance_gain = 0
//! [RULES]
//! rule = query=yes last=<s> => mix(@query)
//! rule = last=<s> => @prior
//! rule = has=apple => apple:1
//! ```

use std::path::Path;

use crate::dist::{LogitVector, Vocabulary};
use crate::error::{Error, Result};

use super::NextTokenProvider;

/// Sentinel usable in `last=`/`last2=` conditions to match positions before
/// the first generated token.
pub const BOS_SENTINEL: &str = "<s>";

/// Marker words the matcher looks for in the rendered input. They come from
/// the render layout: `QUERY: <text>` introduces the query region and
/// `Note:` introduces the hint sentence.
const QUERY_MARKER_WORD: &str = "query:";
const HINT_MARKER_WORD: &str = "note:";
const QUERY_MARKER: &str = "QUERY: ";

#[derive(Debug, Clone, PartialEq)]
enum Cond {
    QueryPresent(bool),
    HintPresent(bool),
    Has(String),
    Last(String),
    Last2(String, String),
}

#[derive(Debug, Clone, PartialEq)]
enum BaseDist {
    /// Uniform over the query-region words that are vocabulary tokens.
    /// A rule using this does not match when that set is empty.
    Query,
    /// The file's prior distribution.
    Prior,
    /// Uniform over the whole vocabulary.
    Uniform,
    /// Explicit `token:weight` list; unlisted tokens get zero.
    Weighted(Vec<(usize, f64)>),
}

#[derive(Debug, Clone, PartialEq)]
struct Rule {
    conds: Vec<Cond>,
    dist: BaseDist,
    /// Mix the resolved distribution toward the prior with weight
    /// `prior_bias`.
    mix_prior: bool,
}

/// Parsed model definition. Immutable once built into a [`TableLm`].
#[derive(Debug, Clone)]
pub struct TableLmSpec {
    vocab: Vocabulary,
    prior: Vec<f64>,
    prior_bias: f64,
    compliance_gain: f64,
    rules: Vec<Rule>,
}

impl TableLmSpec {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let content = std::fs::read_to_string(path)?;
        Self::parse(&content)
    }

    pub fn parse(content: &str) -> Result<Self> {
        Parser::default().parse(content)
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn prior_bias(&self) -> f64 {
        self.prior_bias
    }

    pub fn compliance_gain(&self) -> f64 {
        self.compliance_gain
    }

    /// Same model with different knob settings; used by sweeps and tests.
    pub fn with_params(mut self, prior_bias: f64, compliance_gain: f64) -> Result<Self> {
        validate_params(prior_bias, compliance_gain, 0)?;
        self.prior_bias = prior_bias;
        self.compliance_gain = compliance_gain;
        Ok(self)
    }
}

fn validate_params(prior_bias: f64, compliance_gain: f64, line: usize) -> Result<()> {
    if !(0.0..=1.0).contains(&prior_bias) {
        return Err(Error::Parse {
            line,
            message: format!("prior_bias must be in [0, 1], got {prior_bias}"),
        });
    }
    if !compliance_gain.is_finite() || compliance_gain < 0.0 {
        return Err(Error::Parse {
            line,
            message: format!("compliance_gain must be >= 0, got {compliance_gain}"),
        });
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Section {
    None,
    Vocab,
    Prior,
    Params,
    Rules,
}

#[derive(Default)]
struct Parser {
    tokens: Option<Vec<String>>,
    eos: Option<String>,
    prior_entries: Vec<(usize, String, String)>,
    prior_bias: Option<(usize, f64)>,
    compliance_gain: Option<(usize, f64)>,
    raw_rules: Vec<(usize, String)>,
}

impl Parser {
    fn parse(mut self, content: &str) -> Result<TableLmSpec> {
        let mut section = Section::None;
        for (lineno, raw) in content.lines().enumerate() {
            let line = lineno + 1;
            let trimmed = raw.trim();
            if trimmed.is_empty() || trimmed.starts_with('#') {
                continue;
            }
            if let Some(name) = trimmed.strip_prefix('[').and_then(|s| s.strip_suffix(']')) {
                section = match name {
                    "VOCAB" => Section::Vocab,
                    "PRIOR" => Section::Prior,
                    "PARAMS" => Section::Params,
                    "RULES" => Section::Rules,
                    other => {
                        return Err(Error::Parse {
                            line,
                            message: format!("unknown section [{other}]"),
                        })
                    }
                };
                continue;
            }
            let (key, value) = trimmed.split_once('=').ok_or_else(|| Error::Parse {
                line,
                message: "expected key = value".into(),
            })?;
            let key = key.trim();
            let value = value.trim();
            match section {
                Section::None => {
                    return Err(Error::Parse {
                        line,
                        message: "record outside of any section".into(),
                    })
                }
                Section::Vocab => match key {
                    "tokens" => {
                        self.tokens =
                            Some(value.split_whitespace().map(str::to_string).collect())
                    }
                    "eos" => self.eos = Some(value.to_string()),
                    other => {
                        return Err(Error::Parse {
                            line,
                            message: format!("unknown key {other:?} in [VOCAB]"),
                        })
                    }
                },
                Section::Prior => {
                    self.prior_entries.push((line, key.to_string(), value.to_string()))
                }
                Section::Params => match key {
                    "prior_bias" => {
                        self.prior_bias = Some((line, parse_float(value, line)?));
                    }
                    "compliance_gain" => {
                        self.compliance_gain = Some((line, parse_float(value, line)?));
                    }
                    other => {
                        return Err(Error::Parse {
                            line,
                            message: format!("unknown key {other:?} in [PARAMS]"),
                        })
                    }
                },
                Section::Rules => match key {
                    "rule" => self.raw_rules.push((line, value.to_string())),
                    other => {
                        return Err(Error::Parse {
                            line,
                            message: format!("unknown key {other:?} in [RULES]"),
                        })
                    }
                },
            }
        }
        self.finish()
    }

    fn finish(self) -> Result<TableLmSpec> {
        let tokens = self.tokens.ok_or_else(|| Error::Parse {
            line: 0,
            message: "missing [VOCAB] tokens".into(),
        })?;
        let eos = self.eos.ok_or_else(|| Error::Parse {
            line: 0,
            message: "missing [VOCAB] eos".into(),
        })?;
        let vocab = Vocabulary::new(tokens, &eos)
            .map_err(|e| Error::Parse { line: 0, message: e.to_string() })?;

        // Prior defaults to uniform when the section is absent.
        let prior = if self.prior_entries.is_empty() {
            vec![1.0 / vocab.len() as f64; vocab.len()]
        } else {
            let mut prior = vec![0.0; vocab.len()];
            for (line, token, value) in &self.prior_entries {
                let id = vocab.id(token).ok_or_else(|| Error::Parse {
                    line: *line,
                    message: format!("prior token {token:?} not in vocab"),
                })?;
                prior[id] = parse_float(value, *line)?;
            }
            let sum: f64 = prior.iter().sum();
            if prior.iter().any(|&p| p < 0.0) || (sum - 1.0).abs() > 1e-9 {
                return Err(Error::Parse {
                    line: 0,
                    message: format!("[PRIOR] must be a distribution, sums to {sum}"),
                });
            }
            prior
        };

        let prior_bias = self.prior_bias.map(|(_, v)| v).unwrap_or(0.0);
        let compliance_gain = self.compliance_gain.map(|(_, v)| v).unwrap_or(0.0);
        let line = self
            .prior_bias
            .map(|(l, _)| l)
            .or(self.compliance_gain.map(|(l, _)| l))
            .unwrap_or(0);
        validate_params(prior_bias, compliance_gain, line)?;

        let rules = self
            .raw_rules
            .iter()
            .map(|(line, text)| parse_rule(text, *line, &vocab))
            .collect::<Result<Vec<_>>>()?;

        Ok(TableLmSpec { vocab, prior, prior_bias, compliance_gain, rules })
    }
}

fn parse_float(value: &str, line: usize) -> Result<f64> {
    value.parse::<f64>().map_err(|_| Error::Parse {
        line,
        message: format!("bad number {value:?}"),
    })
}

fn parse_rule(text: &str, line: usize, vocab: &Vocabulary) -> Result<Rule> {
    let (cond_part, dist_part) = text.split_once("=>").ok_or_else(|| Error::Parse {
        line,
        message: "rule needs a => separating conditions from the distribution".into(),
    })?;
    let mut conds = Vec::new();
    for item in cond_part.split_whitespace() {
        let (key, value) = item.split_once('=').ok_or_else(|| Error::Parse {
            line,
            message: format!("bad condition {item:?}"),
        })?;
        let cond = match key {
            "query" => Cond::QueryPresent(parse_yes_no(value, line)?),
            "hint" => Cond::HintPresent(parse_yes_no(value, line)?),
            "has" => Cond::Has(value.to_lowercase()),
            "last" => Cond::Last(check_rule_token(value, line, vocab)?),
            "last2" => {
                let (a, b) = value.split_once(',').ok_or_else(|| Error::Parse {
                    line,
                    message: "last2 takes two comma-separated tokens".into(),
                })?;
                Cond::Last2(
                    check_rule_token(a, line, vocab)?,
                    check_rule_token(b, line, vocab)?,
                )
            }
            other => {
                return Err(Error::Parse {
                    line,
                    message: format!("unknown condition key {other:?}"),
                })
            }
        };
        conds.push(cond);
    }

    let dist_part = dist_part.trim();
    let (inner, mix_prior) = match dist_part.strip_prefix("mix(").and_then(|s| s.strip_suffix(')')) {
        Some(inner) => (inner.trim(), true),
        None => (dist_part, false),
    };
    let dist = match inner {
        "@query" => BaseDist::Query,
        "@prior" => BaseDist::Prior,
        "@uniform" => BaseDist::Uniform,
        weighted => {
            let mut entries = Vec::new();
            let mut sum = 0.0;
            for item in weighted.split_whitespace() {
                let (tok, w) = item.rsplit_once(':').ok_or_else(|| Error::Parse {
                    line,
                    message: format!("bad weight entry {item:?}"),
                })?;
                let id = vocab.id(tok).ok_or_else(|| Error::Parse {
                    line,
                    message: format!("rule token {tok:?} not in vocab"),
                })?;
                let w = parse_float(w, line)?;
                if w < 0.0 {
                    return Err(Error::Parse {
                        line,
                        message: format!("negative weight for {tok:?}"),
                    });
                }
                sum += w;
                entries.push((id, w));
            }
            if entries.is_empty() || (sum - 1.0).abs() > 1e-9 {
                return Err(Error::Parse {
                    line,
                    message: format!("rule distribution must sum to 1, got {sum}"),
                });
            }
            BaseDist::Weighted(entries)
        }
    };
    Ok(Rule { conds, dist, mix_prior })
}

fn parse_yes_no(value: &str, line: usize) -> Result<bool> {
    match value {
        "yes" => Ok(true),
        "no" => Ok(false),
        other => Err(Error::Parse {
            line,
            message: format!("expected yes or no, got {other:?}"),
        }),
    }
}

fn check_rule_token(tok: &str, line: usize, vocab: &Vocabulary) -> Result<String> {
    if tok == BOS_SENTINEL || vocab.id(tok).is_some() {
        Ok(tok.to_string())
    } else {
        Err(Error::Parse {
            line,
            message: format!("rule token {tok:?} not in vocab"),
        })
    }
}

/// Features the matcher extracts from one (context, prefix) state.
struct StepState<'a> {
    words: Vec<String>,
    query_present: bool,
    hint_present: bool,
    /// Vocabulary ids of distinct query-region words, in vocab order.
    query_token_ids: Vec<usize>,
    prefix: &'a [String],
}

impl<'a> StepState<'a> {
    fn extract(context: &str, prefix: &'a [String], vocab: &Vocabulary) -> Self {
        let words: Vec<String> = context.split_whitespace().map(str::to_lowercase).collect();
        let query_present = words.iter().any(|w| w == QUERY_MARKER_WORD);
        let hint_present = words.iter().any(|w| w == HINT_MARKER_WORD);
        let mut query_token_ids = Vec::new();
        if let Some(pos) = context.rfind(QUERY_MARKER) {
            let region = &context[pos + QUERY_MARKER.len()..];
            let mut ids: Vec<usize> = region
                .split_whitespace()
                .filter_map(|w| vocab.id(&w.to_lowercase()))
                .collect();
            ids.sort_unstable();
            ids.dedup();
            query_token_ids = ids;
        }
        Self { words, query_present, hint_present, query_token_ids, prefix }
    }

    fn last(&self, back: usize) -> &str {
        self.prefix
            .len()
            .checked_sub(back)
            .map(|i| self.prefix[i].as_str())
            .unwrap_or(BOS_SENTINEL)
    }

    fn matches(&self, rule: &Rule) -> bool {
        let conds_hold = rule.conds.iter().all(|c| match c {
            Cond::QueryPresent(want) => self.query_present == *want,
            Cond::HintPresent(want) => self.hint_present == *want,
            Cond::Has(word) => self.words.iter().any(|w| w == word),
            Cond::Last(tok) => self.last(1) == tok,
            Cond::Last2(a, b) => self.last(2) == a && self.last(1) == b,
        });
        // A @query rule is only usable when the query region yields tokens.
        conds_hold && !(rule.dist == BaseDist::Query && self.query_token_ids.is_empty())
    }
}

/// The provider built from a [`TableLmSpec`]. Immutable after construction.
#[derive(Debug, Clone)]
pub struct TableLm {
    spec: TableLmSpec,
}

impl TableLm {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Ok(Self { spec: TableLmSpec::load(path)? })
    }

    pub fn from_spec(spec: TableLmSpec) -> Self {
        Self { spec }
    }

    pub fn spec(&self) -> &TableLmSpec {
        &self.spec
    }

    fn resolve(&self, state: &StepState<'_>) -> Vec<f64> {
        let spec = &self.spec;
        let v = spec.vocab.len();
        let matched = spec.rules.iter().find(|r| state.matches(r));
        let mut dist = match matched.map(|r| &r.dist) {
            Some(BaseDist::Query) => {
                let mut d = vec![0.0; v];
                let share = 1.0 / state.query_token_ids.len() as f64;
                for &id in &state.query_token_ids {
                    d[id] = share;
                }
                d
            }
            Some(BaseDist::Prior) => spec.prior.clone(),
            Some(BaseDist::Uniform) | None => vec![1.0 / v as f64; v],
            Some(BaseDist::Weighted(entries)) => {
                let mut d = vec![0.0; v];
                for &(id, w) in entries {
                    d[id] = w;
                }
                d
            }
        };
        if matched.map(|r| r.mix_prior).unwrap_or(false) {
            let b = spec.prior_bias;
            for (d, &p) in dist.iter_mut().zip(&spec.prior) {
                *d = (1.0 - b) * *d + b * p;
            }
        }
        if state.hint_present && spec.compliance_gain > 0.0 && !state.query_token_ids.is_empty() {
            let boost = spec.compliance_gain.exp();
            for &id in &state.query_token_ids {
                dist[id] *= boost;
            }
            let sum: f64 = dist.iter().sum();
            for d in &mut dist {
                *d /= sum;
            }
        }
        dist
    }
}

impl NextTokenProvider for TableLm {
    fn vocabulary(&self) -> &Vocabulary {
        &self.spec.vocab
    }

    fn next_logits(&self, context: &str, prefix: &[String]) -> Result<LogitVector> {
        for tok in prefix {
            if self.spec.vocab.id(tok).is_none() {
                return Err(Error::UnknownToken { token: tok.clone() });
            }
        }
        let state = StepState::extract(context, prefix, &self.spec.vocab);
        let dist = self.resolve(&state);
        LogitVector::new(
            dist.iter()
                .map(|&p| if p > 0.0 { p.ln() } else { f64::NEG_INFINITY })
                .collect(),
        )
    }
}

/// Convenience wrapper mirroring the provider-loading entry point.
pub fn table_lm_load(path: impl AsRef<Path>) -> Result<TableLm> {
    TableLm::load(path)
}
